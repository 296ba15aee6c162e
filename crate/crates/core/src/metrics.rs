//! Accuracy, ROC and AUC with report files.
//!
//! A sample is predicted positive when its score is at least the
//! threshold. The ROC is swept over the distinct scores from high to low
//! and bracketed by `(0,0)` at threshold `+inf` and `(1,1)`; its
//! trapezoidal area equals the pair statistic with ties counted as 1/2.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

pub const ACCURACY_THRESHOLD: f64 = 0.5;
const CSV_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Accuracy at [`ACCURACY_THRESHOLD`].
    pub accuracy: f64,
    /// Highest accuracy over all ROC thresholds (context only).
    pub best_threshold_accuracy: f64,
    pub best_threshold: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub roc: Vec<RocPoint>,
    pub confusion: Confusion,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Evaluate `(score, is_positive)` pairs.
pub fn evaluate(scores: &[(f64, bool)]) -> Result<EvalReport> {
    if scores.is_empty() {
        return Err(Error::invalid("evaluate: no scores"));
    }
    if let Some((s, _)) = scores.iter().find(|(s, _)| !s.is_finite()) {
        return Err(Error::invalid(format!("evaluate: non-finite score {s}")));
    }
    let n_pos = scores.iter().filter(|(_, y)| *y).count();
    let n_neg = scores.len() - n_pos;
    let confusion = confusion_at(scores, ACCURACY_THRESHOLD);

    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut roc = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = (n_neg as f64 / scores.len() as f64, f64::INFINITY);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        roc.push(RocPoint {
            threshold: t,
            fpr: ratio(fp, n_neg),
            tpr: ratio(tp, n_pos),
        });
        let acc = (tp + n_neg - fp) as f64 / scores.len() as f64;
        if acc > best.0 {
            best = (acc, t);
        }
    }
    let auc = (n_pos > 0 && n_neg > 0).then(|| {
        roc.windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum()
    });
    Ok(EvalReport {
        accuracy: confusion.accuracy(),
        best_threshold_accuracy: best.0,
        best_threshold: best.1,
        auc,
        roc,
        confusion,
        n_pos,
        n_neg,
    })
}

/// A single-class rate axis degenerates to 0 until the end, where it is 1.
fn ratio(k: usize, n: usize) -> f64 {
    if n == 0 {
        1.0
    } else {
        k as f64 / n as f64
    }
}

pub fn confusion_at(scores: &[(f64, bool)], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for &(s, y) in scores {
        match (s >= threshold, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

/// AUC only; `None` for single-class input.
pub fn auc(scores: &[(f64, bool)]) -> Option<f64> {
    evaluate(scores).ok()?.auc
}

fn fmt_f(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        v.to_string()
    }
}

fn parse_f(s: &str, what: &'static str) -> Result<f64> {
    match s {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => s.parse().map_err(|_| Error::Format {
            what,
            message: format!("bad number {s:?}"),
        }),
    }
}

pub fn metrics_csv(r: &EvalReport) -> String {
    let mut s = format!("# calcifuse metrics v{CSV_VERSION}\nmetric,value\n");
    let auc = r.auc.map(fmt_f).unwrap_or_else(|| "undefined".into());
    let _ = writeln!(s, "accuracy,{}", fmt_f(r.accuracy));
    let _ = writeln!(s, "best_threshold_accuracy,{}", fmt_f(r.best_threshold_accuracy));
    let _ = writeln!(s, "best_threshold,{}", fmt_f(r.best_threshold));
    let _ = writeln!(s, "auc,{auc}");
    let _ = writeln!(s, "n_pos,{}", r.n_pos);
    let _ = writeln!(s, "n_neg,{}", r.n_neg);
    s
}

pub fn roc_csv(r: &EvalReport) -> String {
    let mut s = format!("# calcifuse roc v{CSV_VERSION}\nthreshold,fpr,tpr\n");
    for p in &r.roc {
        let _ = writeln!(s, "{},{},{}", fmt_f(p.threshold), fmt_f(p.fpr), fmt_f(p.tpr));
    }
    s
}

pub fn confusion_csv(r: &EvalReport) -> String {
    let c = r.confusion;
    format!(
        "# calcifuse confusion v{CSV_VERSION} (threshold {ACCURACY_THRESHOLD})\nactual,predicted_negative,predicted_positive\nnegative,{},{}\npositive,{},{}\n",
        c.tn, c.fp, c.fn_, c.tp
    )
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write `metrics.csv`, `roc.csv`, `confusion.csv` and `roc.png` into
/// `out_dir` (created if needed).
pub fn emit_report(r: &EvalReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write(&out_dir.join("metrics.csv"), &metrics_csv(r))?;
    write(&out_dir.join("roc.csv"), &roc_csv(r))?;
    write(&out_dir.join("confusion.csv"), &confusion_csv(r))?;
    save_roc_plot(&[&r.roc], &out_dir.join("roc.png"))
}

/// One sub-directory report per model, a `metrics.csv` summary table and
/// `roc_combined.png` with one curve per model (colours in
/// [`PLOT_COLORS`] order).
pub fn emit_comparison(reports: &[(&str, &EvalReport)], out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut summary = format!("# calcifuse summary v{CSV_VERSION}\nmodel,accuracy,best_threshold_accuracy,auc,n_pos,n_neg\n");
    for (name, r) in reports {
        emit_report(r, &out_dir.join(name))?;
        let auc = r.auc.map(fmt_f).unwrap_or_else(|| "undefined".into());
        let _ = writeln!(
            summary,
            "{name},{},{},{auc},{},{}",
            fmt_f(r.accuracy),
            fmt_f(r.best_threshold_accuracy),
            r.n_pos,
            r.n_neg
        );
    }
    write(&out_dir.join("metrics.csv"), &summary)?;
    let curves: Vec<&[RocPoint]> = reports.iter().map(|(_, r)| r.roc.as_slice()).collect();
    save_roc_plot(&curves, &out_dir.join("roc_combined.png"))
}

fn data_lines<'a>(text: &'a str, header: &str, what: &'static str) -> Result<Vec<&'a str>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    if lines.next() != Some(header) {
        return Err(Error::Format {
            what,
            message: format!("expected header {header:?}"),
        });
    }
    Ok(lines.filter(|l| !l.is_empty()).collect())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parse the CSVs written by [`emit_report`].
pub fn read_report(dir: &Path) -> Result<EvalReport> {
    let bad = |what: &'static str, m: &str| Error::Format {
        what,
        message: m.to_string(),
    };
    let metrics = read(&dir.join("metrics.csv"))?;
    let mut kv = std::collections::HashMap::new();
    for l in data_lines(&metrics, "metric,value", "metrics.csv")? {
        let (k, v) = l.split_once(',').ok_or_else(|| bad("metrics.csv", l))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| kv.get(k).cloned().ok_or_else(|| bad("metrics.csv", &format!("missing {k}")));
    let count = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad("metrics.csv", k)) };
    let auc = match get("auc")?.as_str() {
        "undefined" => None,
        s => Some(parse_f(s, "metrics.csv")?),
    };

    let roc_text = read(&dir.join("roc.csv"))?;
    let mut roc = Vec::new();
    for l in data_lines(&roc_text, "threshold,fpr,tpr", "roc.csv")? {
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != 3 {
            return Err(bad("roc.csv", l));
        }
        roc.push(RocPoint {
            threshold: parse_f(f[0], "roc.csv")?,
            fpr: parse_f(f[1], "roc.csv")?,
            tpr: parse_f(f[2], "roc.csv")?,
        });
    }

    let conf_text = read(&dir.join("confusion.csv"))?;
    let rows = data_lines(&conf_text, "actual,predicted_negative,predicted_positive", "confusion.csv")?;
    let cell = |row: usize, col: usize| -> Result<usize> {
        rows.get(row)
            .and_then(|l| l.split(',').nth(col))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("confusion.csv", "malformed table"))
    };
    let confusion = Confusion {
        tn: cell(0, 1)?,
        fp: cell(0, 2)?,
        fn_: cell(1, 1)?,
        tp: cell(1, 2)?,
    };
    Ok(EvalReport {
        accuracy: parse_f(&get("accuracy")?, "metrics.csv")?,
        best_threshold_accuracy: parse_f(&get("best_threshold_accuracy")?, "metrics.csv")?,
        best_threshold: parse_f(&get("best_threshold")?, "metrics.csv")?,
        auc,
        roc,
        confusion,
        n_pos: count("n_pos")?,
        n_neg: count("n_neg")?,
    })
}

/// Curve colours of ROC plots, in input order.
pub const PLOT_COLORS: [[u8; 3]; 4] = [[31, 119, 180], [255, 127, 14], [214, 39, 40], [44, 160, 44]];
const PLOT_SIZE: usize = 320;
const MARGIN: usize = 20;

struct Canvas {
    px: Vec<[u8; 3]>,
}

impl Canvas {
    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if (0..PLOT_SIZE as i64).contains(&x) && (0..PLOT_SIZE as i64).contains(&y) {
            self.px[y as usize * PLOT_SIZE + x as usize] = c;
        }
    }

    fn line(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: [u8; 3], dashed: bool, thick: bool) {
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for i in 0..=steps {
            if dashed && (i / 4) % 2 == 1 {
                continue;
            }
            let t = i as f64 / steps as f64;
            let (x, y) = ((x0 + (x1 - x0) * t).round() as i64, (y0 + (y1 - y0) * t).round() as i64);
            self.put(x, y, c);
            if thick {
                self.put(x + 1, y, c);
                self.put(x, y + 1, c);
            }
        }
    }
}

fn to_canvas(fpr: f64, tpr: f64) -> (f64, f64) {
    let span = (PLOT_SIZE - 2 * MARGIN) as f64;
    (MARGIN as f64 + fpr * span, (PLOT_SIZE - MARGIN) as f64 - tpr * span)
}

/// Render ROC curves (fpr on x, tpr on y, chance diagonal dashed) as RGB
/// pixels, row-major.
pub fn render_roc_plot(curves: &[&[RocPoint]]) -> (usize, usize, Vec<u8>) {
    let mut canvas = Canvas {
        px: vec![[255, 255, 255]; PLOT_SIZE * PLOT_SIZE],
    };
    let grey = [170, 170, 170];
    let black = [0, 0, 0];
    canvas.line(to_canvas(0.0, 0.0), to_canvas(1.0, 1.0), grey, true, false);
    for (a, b) in [((0.0, 0.0), (1.0, 0.0)), ((0.0, 0.0), (0.0, 1.0)), ((1.0, 0.0), (1.0, 1.0)), ((0.0, 1.0), (1.0, 1.0))] {
        canvas.line(to_canvas(a.0, a.1), to_canvas(b.0, b.1), black, false, false);
    }
    for tick in 1..10 {
        let v = tick as f64 / 10.0;
        let (x, y) = to_canvas(v, v);
        canvas.line((x, (PLOT_SIZE - MARGIN) as f64), (x, (PLOT_SIZE - MARGIN + 4) as f64), black, false, false);
        canvas.line(((MARGIN - 4) as f64, y), (MARGIN as f64, y), black, false, false);
    }
    for (i, curve) in curves.iter().enumerate() {
        let c = PLOT_COLORS[i % PLOT_COLORS.len()];
        for w in curve.windows(2) {
            canvas.line(to_canvas(w[0].fpr, w[0].tpr), to_canvas(w[1].fpr, w[1].tpr), c, false, true);
        }
    }
    (PLOT_SIZE, PLOT_SIZE, canvas.px.into_iter().flatten().collect())
}

pub fn save_roc_plot(curves: &[&[RocPoint]], path: &Path) -> Result<()> {
    let (w, h, rgb) = render_roc_plot(curves);
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let err = |e: png::EncodingError| Error::Format {
        what: "png",
        message: format!("{}: {e}", path.display()),
    };
    let mut writer = enc.write_header().map_err(err)?;
    writer.write_image_data(&rgb).map_err(err)?;
    writer.finish().map_err(err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_scores() {
        let s = [(0.9, true), (0.8, true), (0.3, false), (0.1, false)];
        let r = evaluate(&s).unwrap();
        assert_eq!(r.auc, Some(1.0));
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.roc.first().unwrap().threshold, f64::INFINITY);
        let last = r.roc.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }

    #[test]
    fn all_tied_is_one_half() {
        let s: Vec<(f64, bool)> = (0..10).map(|i| (0.4, i % 2 == 0)).collect();
        let r = evaluate(&s).unwrap();
        assert_eq!(r.auc, Some(0.5));
        assert_eq!(r.roc.len(), 2);
        assert_eq!(r.confusion, Confusion { tp: 0, fp: 0, tn: 5, fn_: 5 });
    }

    #[test]
    fn single_class_has_no_auc() {
        let r = evaluate(&[(0.7, true), (0.2, true)]).unwrap();
        assert_eq!(r.auc, None);
        assert_eq!(r.accuracy, 0.5);
        assert!(evaluate(&[]).is_err());
        assert!(evaluate(&[(f64::NAN, true)]).is_err());
    }

    #[test]
    fn threshold_is_inclusive_and_best_accuracy_reported() {
        let s = [(0.5, true), (0.4, true), (0.45, false), (0.1, false)];
        let r = evaluate(&s).unwrap();
        assert_eq!(r.confusion.tp, 1);
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.best_threshold_accuracy, 0.75);
        assert_eq!(r.auc, Some(0.75));
    }

    #[test]
    fn roc_plot_has_curve_pixels() {
        let r = evaluate(&[(0.9, true), (0.2, false), (0.6, true), (0.7, false)]).unwrap();
        let (w, h, rgb) = render_roc_plot(&[&r.roc]);
        assert_eq!(rgb.len(), w * h * 3);
        assert!(rgb.chunks(3).any(|p| p == PLOT_COLORS[0]));
    }
}

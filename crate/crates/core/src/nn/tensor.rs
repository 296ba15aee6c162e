/// Batch of feature maps in `[C][B][H][W]` layout. Feature vectors are
/// the `h = w = 1` case, i.e. a `C x B` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, b: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            b,
            h,
            w,
            data: vec![0.0; c * b * h * w],
        }
    }

    pub fn from_data(c: usize, b: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), c * b * h * w, "tensor data length");
        Tensor { c, b, h, w, data }
    }

    /// Stack single-channel images (each `h*w`, row-major) into a batch.
    pub fn from_images(images: &[&[f32]], h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            assert_eq!(img.len(), h * w, "image size");
            data.extend_from_slice(img);
        }
        Tensor::from_data(1, images.len(), h, w, data)
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Values of channel `c`, sample `b`.
    pub fn sample(&self, c: usize, b: usize) -> &[f32] {
        let p = self.plane();
        let off = (c * self.b + b) * p;
        &self.data[off..off + p]
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.c, self.b, self.h, self.w)
    }

    /// Column `b` of a `C x B` feature matrix.
    pub fn column(&self, b: usize) -> Vec<f32> {
        (0..self.c).map(|c| self.data[c * self.b * self.plane() + b * self.plane()]).collect()
    }

    /// Concatenate feature matrices along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
        let first = parts[0];
        let mut data = Vec::new();
        let mut c = 0;
        for p in parts {
            assert_eq!((p.b, p.h, p.w), (first.b, first.h, first.w), "concat shape");
            data.extend_from_slice(&p.data);
            c += p.c;
        }
        Tensor::from_data(c, first.b, first.h, first.w, data)
    }

    /// Split along channels into pieces of the given sizes.
    pub fn split_channels(&self, sizes: &[usize]) -> Vec<Tensor> {
        let stride = self.b * self.plane();
        let mut out = Vec::new();
        let mut start = 0;
        for &s in sizes {
            out.push(Tensor::from_data(
                s,
                self.b,
                self.h,
                self.w,
                self.data[start * stride..(start + s) * stride].to_vec(),
            ));
            start += s;
        }
        assert_eq!(start, self.c, "split sizes");
        out
    }
}

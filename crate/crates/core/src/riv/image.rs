use super::CHANNELS;

/// `H × W × 3` image in row-major, channel-last order plus a validity mask.
///
/// Invalid pixels hold zero in every channel.
#[derive(Debug, Clone, PartialEq)]
pub struct RivImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
    valid: Vec<bool>,
}

impl RivImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        RivImage {
            height,
            width,
            data: vec![0.0; height * width * CHANNELS],
            valid: vec![false; height * width],
        }
    }

    /// Builds an image from raw buffers; zeroes channels of invalid pixels.
    pub fn from_parts(height: usize, width: usize, mut data: Vec<f32>, valid: Vec<bool>) -> Option<Self> {
        if data.len() != height * width * CHANNELS || valid.len() != height * width {
            return None;
        }
        for (i, &ok) in valid.iter().enumerate() {
            if !ok {
                data[i * CHANNELS..(i + 1) * CHANNELS].fill(0.0);
            }
        }
        Some(RivImage {
            height,
            width,
            data,
            valid,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    #[inline]
    pub fn get(&self, v: usize, u: usize, c: usize) -> f32 {
        self.data[(v * self.width + u) * CHANNELS + c]
    }

    #[inline]
    pub fn is_valid(&self, v: usize, u: usize) -> bool {
        self.valid[v * self.width + u]
    }

    /// Channels of a valid pixel, `None` otherwise.
    pub fn pixel(&self, v: usize, u: usize) -> Option<[f32; 3]> {
        if !self.is_valid(v, u) {
            return None;
        }
        let i = (v * self.width + u) * CHANNELS;
        Some([self.data[i], self.data[i + 1], self.data[i + 2]])
    }

    pub fn set_pixel(&mut self, v: usize, u: usize, ch: [f32; 3]) {
        let i = v * self.width + u;
        self.data[i * CHANNELS..(i + 1) * CHANNELS].copy_from_slice(&ch);
        self.valid[i] = true;
    }

    pub fn clear_pixel(&mut self, v: usize, u: usize) {
        let i = v * self.width + u;
        self.data[i * CHANNELS..(i + 1) * CHANNELS].fill(0.0);
        self.valid[i] = false;
    }

    pub(crate) fn copy_pixel_from(&mut self, v: usize, u: usize, src: &RivImage, sv: usize, su: usize) {
        let d = v * self.width + u;
        let s = sv * src.width + su;
        self.data[d * CHANNELS..(d + 1) * CHANNELS]
            .copy_from_slice(&src.data[s * CHANNELS..(s + 1) * CHANNELS]);
        self.valid[d] = src.valid[s];
    }
}

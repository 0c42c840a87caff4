/// 8-bit grayscale image, row-major, `pixels[v * width + u]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    pub fn get(&self, u: usize, v: usize) -> u8 {
        self.pixels[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, value: u8) {
        self.pixels[v * self.width + u] = value;
    }

    /// Column/row of the brightest pixel; the first one in row-major order on ties.
    pub fn argmax(&self) -> Option<(usize, usize)> {
        let mut best: Option<(usize, u8)> = None;
        for (i, &p) in self.pixels.iter().enumerate() {
            if best.is_none_or(|(_, b)| p > b) {
                best = Some((i, p));
            }
        }
        best.map(|(i, _)| (i % self.width, i / self.width))
    }
}

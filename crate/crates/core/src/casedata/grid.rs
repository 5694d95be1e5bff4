/// A 2-D grid of intensities, row-major, `height` rows by `width` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(height * width, data.len(), "grid data length");
        Grid {
            height,
            width,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Grid::new(height, width, vec![0.0; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Grid::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Sub-grid `[y0, y0+h) x [x0, x0+w)`; must lie inside the grid.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Grid {
        assert!(y0 + h <= self.height && x0 + w <= self.width, "crop out of bounds");
        Grid::from_fn(h, w, |y, x| self.get(y0 + y, x0 + x))
    }

    pub fn flip_horizontal(&self) -> Grid {
        Grid::from_fn(self.height, self.width, |y, x| {
            self.get(y, self.width - 1 - x)
        })
    }

    /// Places this grid at the top-left of a zero grid of the given extents.
    pub fn pad_to(&self, height: usize, width: usize) -> Grid {
        assert!(height >= self.height && width >= self.width);
        Grid::from_fn(height, width, |y, x| {
            if y < self.height && x < self.width {
                self.get(y, x)
            } else {
                0.0
            }
        })
    }

    /// Bilinear resampling with half-pixel centres and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Grid {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let source = |dst: usize, scale: f64, extent: usize| {
            let s = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(extent - 1);
            let i1 = (i0 + 1).min(extent - 1);
            (i0, i1, s - i0 as f64)
        };
        let cols: Vec<_> = (0..width).map(|x| source(x, sx, self.width)).collect();
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            let (y0, y1, fy) = source(y, sy, self.height);
            for &(x0, x1, fx) in &cols {
                let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
                let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        Grid::new(height, width, data)
    }
}

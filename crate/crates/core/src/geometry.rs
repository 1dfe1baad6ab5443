use crate::scalar::Scalar;

/// Position in the DoI frame (metres, origin at the lower-left DoI corner).
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> Point<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn distance(self, other: Self) -> T {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Uniform rectangular grid covering the DoI; cells are indexed in row-major
/// order with cell 0 at the lower-left corner.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid<T> {
    pub nx: usize,
    pub ny: usize,
    pub width: T,
    pub height: T,
}

impl<T: Scalar> Grid<T> {
    pub fn new(nx: usize, ny: usize, width: T, height: T) -> Self {
        Self {
            nx,
            ny,
            width,
            height,
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn dx(&self) -> T {
        self.width / T::from_usize_lossy(self.nx)
    }

    #[inline]
    pub fn dy(&self) -> T {
        self.height / T::from_usize_lossy(self.ny)
    }

    #[inline]
    pub fn cell_area(&self) -> T {
        self.dx() * self.dy()
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    #[inline]
    pub fn center(&self, ix: usize, iy: usize) -> Point<T> {
        let half = T::c(0.5);
        Point::new(
            (T::from_usize_lossy(ix) + half) * self.dx(),
            (T::from_usize_lossy(iy) + half) * self.dy(),
        )
    }

    pub fn centers(&self) -> Vec<Point<T>> {
        let mut out = Vec::with_capacity(self.len());
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                out.push(self.center(ix, iy));
            }
        }
        out
    }

    /// Cell containing `p`, if any.
    pub fn locate(&self, p: Point<T>) -> Option<(usize, usize)> {
        if p.x < T::zero() || p.y < T::zero() || p.x >= self.width || p.y >= self.height {
            return None;
        }
        let ix = (p.x / self.dx()).floor().to_usize()?.min(self.nx - 1);
        let iy = (p.y / self.dy()).floor().to_usize()?.min(self.ny - 1);
        Some((ix, iy))
    }
}

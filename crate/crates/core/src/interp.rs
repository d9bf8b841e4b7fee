//! Real-valued volumes and zero-padded trilinear interpolation.

use crate::scalar::Real;
use crate::scene::Scene;

#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Real> Volume<T> {
    pub fn from_scene(scene: &Scene) -> Self {
        Volume {
            dims: scene.dims(),
            data: scene.data().iter().map(|&v| T::of(v as f64)).collect(),
        }
    }

    #[inline]
    fn at(&self, x: isize, y: isize, z: isize) -> T {
        let [nx, ny, nz] = self.dims;
        if x < 0 || y < 0 || z < 0 || x >= nx as isize || y >= ny as isize || z >= nz as isize {
            return T::zero();
        }
        self.data[x as usize + nx * (y as usize + ny * z as usize)]
    }

    #[inline]
    fn outside(&self, p: [T; 3]) -> bool {
        (0..3).any(|a| !(p[a] > -T::one() && p[a] < T::of_usize(self.dims[a])))
    }

    /// Trilinear sample treating everything outside the grid as 0.
    #[inline]
    pub fn sample(&self, p: [T; 3]) -> T {
        if self.outside(p) {
            return T::zero();
        }
        let (x0, fx) = split(p[0]);
        let (y0, fy) = split(p[1]);
        let (z0, fz) = split(p[2]);
        let one = T::one();
        let c00 = self.at(x0, y0, z0) * (one - fx) + self.at(x0 + 1, y0, z0) * fx;
        let c10 = self.at(x0, y0 + 1, z0) * (one - fx) + self.at(x0 + 1, y0 + 1, z0) * fx;
        let c01 = self.at(x0, y0, z0 + 1) * (one - fx) + self.at(x0 + 1, y0, z0 + 1) * fx;
        let c11 = self.at(x0, y0 + 1, z0 + 1) * (one - fx) + self.at(x0 + 1, y0 + 1, z0 + 1) * fx;
        let c0 = c00 * (one - fy) + c10 * fy;
        let c1 = c01 * (one - fy) + c11 * fy;
        c0 * (one - fz) + c1 * fz
    }

    /// Sample together with its analytic gradient (derivative of the
    /// trilinear interpolant within the cell).
    #[inline]
    pub fn sample_with_gradient(&self, p: [T; 3]) -> (T, [T; 3]) {
        if self.outside(p) {
            return (T::zero(), [T::zero(); 3]);
        }
        let (x0, fx) = split(p[0]);
        let (y0, fy) = split(p[1]);
        let (z0, fz) = split(p[2]);
        let one = T::one();
        let v000 = self.at(x0, y0, z0);
        let v100 = self.at(x0 + 1, y0, z0);
        let v010 = self.at(x0, y0 + 1, z0);
        let v110 = self.at(x0 + 1, y0 + 1, z0);
        let v001 = self.at(x0, y0, z0 + 1);
        let v101 = self.at(x0 + 1, y0, z0 + 1);
        let v011 = self.at(x0, y0 + 1, z0 + 1);
        let v111 = self.at(x0 + 1, y0 + 1, z0 + 1);
        let (gx, gy, gz) = (one - fx, one - fy, one - fz);

        let c00 = v000 * gx + v100 * fx;
        let c10 = v010 * gx + v110 * fx;
        let c01 = v001 * gx + v101 * fx;
        let c11 = v011 * gx + v111 * fx;
        let c0 = c00 * gy + c10 * fy;
        let c1 = c01 * gy + c11 * fy;
        let value = c0 * gz + c1 * fz;

        let dx0 = (v100 - v000) * gy + (v110 - v010) * fy;
        let dx1 = (v101 - v001) * gy + (v111 - v011) * fy;
        let dx = dx0 * gz + dx1 * fz;
        let dy = (c10 - c00) * gz + (c11 - c01) * fz;
        let dz = c1 - c0;
        (value, [dx, dy, dz])
    }

    /// 2×2×2 box-average downsampling; a trailing odd slice averages what
    /// is available. Coarse coordinate `x_c` corresponds to fine `2·x_c + ½`.
    pub fn downsample(&self) -> Self {
        let [nx, ny, nz] = self.dims;
        let cd = [nx.div_ceil(2), ny.div_ceil(2), nz.div_ceil(2)];
        let mut data = Vec::with_capacity(cd[0] * cd[1] * cd[2]);
        for z in 0..cd[2] {
            for y in 0..cd[1] {
                for x in 0..cd[0] {
                    let mut acc = T::zero();
                    let mut count = 0usize;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let (fx, fy, fz) = (2 * x + dx, 2 * y + dy, 2 * z + dz);
                                if fx < nx && fy < ny && fz < nz {
                                    acc += self.data[fx + nx * (fy + ny * fz)];
                                    count += 1;
                                }
                            }
                        }
                    }
                    data.push(acc / T::of_usize(count));
                }
            }
        }
        Volume { dims: cd, data }
    }
}

#[inline]
fn split<T: Real>(v: T) -> (isize, T) {
    let f = v.floor();
    (f.to_isize().unwrap_or(isize::MIN / 2), v - f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Volume<f64> {
        // f = 2x + 3y − z + 10 on a 4×5×6 grid
        let dims = [4, 5, 6];
        let mut data = vec![];
        for z in 0..6 {
            for y in 0..5 {
                for x in 0..4 {
                    data.push(2.0 * x as f64 + 3.0 * y as f64 - z as f64 + 10.0);
                }
            }
        }
        Volume { dims, data }
    }

    #[test]
    fn linear_fields_are_reproduced_inside() {
        let v = ramp();
        let p = [1.3, 2.7, 3.1];
        let (val, g) = v.sample_with_gradient(p);
        assert!((val - (2.0 * 1.3 + 3.0 * 2.7 - 3.1 + 10.0)).abs() < 1e-12);
        assert!((g[0] - 2.0).abs() < 1e-12 && (g[1] - 3.0).abs() < 1e-12 && (g[2] + 1.0).abs() < 1e-12);
        assert_eq!(v.sample([2.0, 3.0, 4.0]), 2.0 * 2.0 + 9.0 - 4.0 + 10.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let v = Volume {
            dims: [3, 3, 3],
            data: (0..27).map(|i| ((i * 37) % 11) as f64).collect(),
        };
        let p = [0.4, 1.3, 0.7];
        let (_, g) = v.sample_with_gradient(p);
        let h = 1e-6;
        for a in 0..3 {
            let mut lo = p;
            let mut hi = p;
            lo[a] -= h;
            hi[a] += h;
            let fd = (v.sample(hi) - v.sample(lo)) / (2.0 * h);
            assert!((fd - g[a]).abs() < 1e-6, "axis {a}: {fd} vs {}", g[a]);
        }
    }

    #[test]
    fn zero_outside() {
        let v = ramp();
        assert_eq!(v.sample([-1.5, 0.0, 0.0]), 0.0);
        assert_eq!(v.sample([0.0, 0.0, 6.0]), 0.0);
        // half-way past the edge blends with the zero padding
        assert!((v.sample([3.5, 0.0, 0.0]) - 0.5 * 16.0).abs() < 1e-12);
    }

    #[test]
    fn downsample_averages_blocks() {
        let v = Volume::<f64> {
            dims: [3, 2, 2],
            data: (0..12).map(|i| i as f64).collect(),
        };
        let d = v.downsample();
        assert_eq!(d.dims, [2, 1, 1]);
        // block x∈{0,1}: values 0,1,3,4,6,7,9,10
        assert_eq!(d.data[0], 40.0 / 8.0);
        // trailing x=2: values 2,5,8,11
        assert_eq!(d.data[1], 26.0 / 4.0);
    }
}

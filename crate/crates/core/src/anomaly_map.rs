//! Patch score grids and the full-resolution anomaly maps rendered from them.

use std::io::Write;

use crate::detectors::Detector;
use crate::embedding::reflect_index;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default Gaussian smoothing of rendered maps, in output pixels.
pub const DEFAULT_SIGMA: f64 = 4.0;

/// Per-cell anomaly scores on the embedding grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchScoreMap {
    grid: (usize, usize),
    scores: Vec<f64>,
    detector: Detector,
    degenerate_cells: usize,
}

impl PatchScoreMap {
    pub fn new(grid: (usize, usize), scores: Vec<f64>, detector: Detector) -> Result<Self> {
        if scores.len() != grid.0 * grid.1 {
            return Err(Error::arg(format!(
                "{} scores for a {}×{} grid",
                scores.len(),
                grid.0,
                grid.1
            )));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("patch scores must be finite".into()));
        }
        Ok(PatchScoreMap {
            grid,
            scores,
            detector,
            degenerate_cells: 0,
        })
    }

    pub(crate) fn with_degenerate_cells(mut self, n: usize) -> Self {
        self.degenerate_cells = n;
        self
    }

    pub fn from_tensor(t: &Tensor, detector: Detector) -> Result<Self> {
        if t.ndim() != 2 {
            return Err(Error::arg("patch score tensor must be 2-D"));
        }
        Self::new((t.shape()[0], t.shape()[1]), t.to_f64_vec(), detector)
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn detector(&self) -> Detector {
        self.detector
    }

    /// Cells whose displacement from the background mean vanished.
    pub fn degenerate_cells(&self) -> usize {
        self.degenerate_cells
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::f32_from_f64(vec![self.grid.0, self.grid.1], &self.scores).expect("shape checked")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    image_score: f64,
    sigma: f64,
}

impl AnomalyMap {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>, sigma: f64) -> Result<Self> {
        if pixels.len() != height * width || pixels.is_empty() {
            return Err(Error::arg("anomaly map pixels do not match its extents"));
        }
        let image_score = pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(AnomalyMap {
            height,
            width,
            pixels,
            image_score,
            sigma,
        })
    }

    pub fn from_tensor(t: &Tensor, sigma: f64) -> Result<Self> {
        if t.ndim() != 2 {
            return Err(Error::arg("anomaly map tensor must be 2-D"));
        }
        Self::new(t.shape()[0], t.shape()[1], t.to_f64_vec(), sigma)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Maximum pixel value.
    pub fn image_score(&self) -> f64 {
        self.image_score
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::f32_from_f64(vec![self.height, self.width], &self.pixels).expect("shape checked")
    }

    /// Binary PGM (P5) rendering, linearly stretched over `[lo, hi]`.
    pub fn write_pgm<W: Write>(&self, out: &mut W, lo: f64, hi: f64) -> std::io::Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        let span = if hi > lo { hi - lo } else { 1.0 };
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        out.write_all(&bytes)
    }
}

/// Source coordinates and weights for half-pixel-centred linear resampling
/// along one axis.
fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let x = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, x - i0 as f64)
        })
        .collect()
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    for v in &mut k {
        *v /= total;
    }
    k
}

fn blur(pixels: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * pixels[i * w + reflect_index(j as isize + t as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * tmp[reflect_index(i as isize + t as isize - r, h) * w + j])
                .sum();
        }
    }
    out
}

/// Bilinear upsampling (half-pixel centres) to `out_h × out_w`, then a
/// Gaussian blur truncated at 4σ with reflected borders. `sigma = 0`
/// disables the blur.
pub fn render_map(
    patch: &PatchScoreMap,
    out_h: usize,
    out_w: usize,
    sigma: f64,
) -> Result<AnomalyMap> {
    let (gh, gw) = patch.grid();
    if gh == 0 || gw == 0 {
        return Err(Error::arg("patch grid is empty"));
    }
    if out_h < gh || out_w < gw {
        return Err(Error::arg(format!(
            "target {out_h}×{out_w} is smaller than the {gh}×{gw} grid"
        )));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::arg(format!(
            "sigma must be non-negative, got {sigma}"
        )));
    }
    let rows = linear_taps(gh, out_h);
    let cols = linear_taps(gw, out_w);
    let s = patch.scores();
    let mut pixels = vec![0.0; out_h * out_w];
    for (i, &(r0, r1, fy)) in rows.iter().enumerate() {
        for (j, &(c0, c1, fx)) in cols.iter().enumerate() {
            let top = s[r0 * gw + c0] * (1.0 - fx) + s[r0 * gw + c1] * fx;
            let bottom = s[r1 * gw + c0] * (1.0 - fx) + s[r1 * gw + c1] * fx;
            pixels[i * out_w + j] = top * (1.0 - fy) + bottom * fy;
        }
    }
    if sigma > 0.0 {
        pixels = blur(&pixels, out_h, out_w, sigma);
    }
    AnomalyMap::new(out_h, out_w, pixels, sigma)
}

/// Min-max rescales all maps to `[0, 1]` with one global range. Returns the
/// maps and whether the range was degenerate (every value equal), in which
/// case all pixels become 0.5.
pub fn normalize_maps(maps: &[AnomalyMap]) -> Result<(Vec<AnomalyMap>, bool)> {
    if maps.is_empty() {
        return Err(Error::arg("no maps to normalize"));
    }
    let lo = maps
        .iter()
        .flat_map(|m| m.pixels.iter().copied())
        .fold(f64::INFINITY, f64::min);
    let hi = maps
        .iter()
        .flat_map(|m| m.pixels.iter().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    let degenerate = !(hi > lo);
    let out = maps
        .iter()
        .map(|m| {
            let pixels = m
                .pixels
                .iter()
                .map(|&v| {
                    if degenerate {
                        0.5
                    } else {
                        (v - lo) / (hi - lo)
                    }
                })
                .collect();
            AnomalyMap::new(m.height, m.width, pixels, m.sigma)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, degenerate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn patch(h: usize, w: usize, v: Vec<f64>) -> PatchScoreMap {
        PatchScoreMap::new((h, w), v, Detector::Ace).unwrap()
    }

    #[test]
    fn constants_survive_rendering() {
        for sigma in [0.0, 1.0, 4.0, 9.5] {
            let m = render_map(&patch(3, 5, vec![0.7; 15]), 12, 20, sigma).unwrap();
            assert!(m.pixels().iter().all(|&v| (v - 0.7).abs() < 1e-12));
            assert!((m.image_score() - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn single_cell_replicates() {
        let m = render_map(&patch(1, 1, vec![-0.25]), 6, 9, 0.0).unwrap();
        assert!(m.pixels().iter().all(|&v| v == -0.25));
    }

    #[test]
    fn half_pixel_bilinear_columns() {
        let m = render_map(&patch(2, 2, vec![0.0, 1.0, 0.0, 1.0]), 4, 4, 0.0).unwrap();
        for row in m.pixels().chunks(4) {
            assert_eq!(row, &[0.0, 0.25, 0.75, 1.0]);
        }
    }

    #[test]
    fn rejects_bad_targets() {
        assert!(render_map(&patch(4, 4, vec![0.0; 16]), 3, 8, 0.0).is_err());
        assert!(render_map(&patch(1, 1, vec![0.0]), 3, 8, -1.0).is_err());
    }

    #[test]
    fn image_score_is_exact_max() {
        let m = render_map(&patch(2, 3, vec![0.1, 0.9, 0.3, 0.2, 0.4, 0.5]), 8, 12, 1.5).unwrap();
        let max = m.pixels().iter().copied().fold(f64::MIN, f64::max);
        assert_eq!(m.image_score(), max);
    }

    #[test]
    fn normalization() {
        let a = AnomalyMap::new(1, 2, vec![-1.0, 0.0], 0.0).unwrap();
        let b = AnomalyMap::new(1, 2, vec![0.5, 1.0], 0.0).unwrap();
        let (out, deg) = normalize_maps(&[a, b]).unwrap();
        assert!(!deg);
        assert_eq!(out[0].pixels(), &[0.0, 0.5]);
        assert_eq!(out[1].pixels(), &[0.75, 1.0]);
        assert_eq!(out[1].image_score(), 1.0);

        let fixed = AnomalyMap::new(1, 3, vec![0.0, 0.3, 1.0], 0.0).unwrap();
        let (out, _) = normalize_maps(std::slice::from_ref(&fixed)).unwrap();
        assert_eq!(out[0], fixed);

        let flat = AnomalyMap::new(1, 2, vec![2.0, 2.0], 0.0).unwrap();
        let (out, deg) = normalize_maps(&[flat]).unwrap();
        assert!(deg);
        assert_eq!(out[0].pixels(), &[0.5, 0.5]);
        assert!(normalize_maps(&[]).is_err());
    }

    #[test]
    fn pgm_header() {
        let m = AnomalyMap::new(2, 3, vec![0.0, 0.5, 1.0, 1.0, 0.5, 0.0], 0.0).unwrap();
        let mut buf = Vec::new();
        m.write_pgm(&mut buf, 0.0, 1.0).unwrap();
        assert!(buf.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&buf[buf.len() - 6..], &[0, 128, 255, 255, 128, 0]);
    }

    proptest! {
        #[test]
        fn rendering_is_monotone(
            base in proptest::collection::vec(-1.0f64..1.0, 12),
            bump in proptest::collection::vec(0.0f64..0.5, 12),
            sigma in 0.0f64..3.0,
        ) {
            let hi: Vec<f64> = base.iter().zip(&bump).map(|(a, b)| a + b).collect();
            let a = render_map(&patch(3, 4, hi), 9, 16, sigma).unwrap();
            let b = render_map(&patch(3, 4, base), 9, 16, sigma).unwrap();
            for (x, y) in a.pixels().iter().zip(b.pixels()) {
                prop_assert!(x + 1e-12 >= *y);
            }
        }

        // With an odd integer scale factor every cell centre coincides with a
        // pixel centre, so the peak value is attained inside its own cell.
        #[test]
        fn argmax_within_peak_footprint(values in proptest::collection::vec(-1.0f64..1.0, 16)) {
            let p = patch(4, 4, values.clone());
            let m = render_map(&p, 12, 12, 0.0).unwrap();
            let peak = values.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            let (pi, pj) = (peak / 4, peak % 4);
            let arg = m.pixels().iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            let (ai, aj) = (arg / 12, arg % 12);
            prop_assert!((3 * pi..3 * pi + 3).contains(&ai));
            prop_assert!((3 * pj..3 * pj + 3).contains(&aj));
            prop_assert_eq!(m.image_score(), values[peak]);
        }
    }
}

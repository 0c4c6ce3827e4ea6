//! Patch embeddings: a deterministic three-level convolutional extractor and
//! the assembly step that aligns, concatenates and subsets its channels.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Channel counts of the toy extractor levels.
pub const TOY_CHANNELS: [usize; 3] = [16, 32, 64];
/// Concatenated channel count of the toy extractor.
pub const TOY_TOTAL_CHANNELS: usize = 16 + 32 + 64;

/// Three feature maps, shallowest first, each `C × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: [Tensor; 3],
}

impl FeaturePyramid {
    pub fn new(levels: [Tensor; 3]) -> Result<Self> {
        for (k, level) in levels.iter().enumerate() {
            if level.ndim() != 3 {
                return Err(Error::arg(format!(
                    "level {} must be C×H×W, got shape {:?}",
                    k + 1,
                    level.shape()
                )));
            }
        }
        for k in 1..3 {
            let (prev, cur) = (levels[k - 1].shape(), levels[k].shape());
            if cur[1] > prev[1] || cur[2] > prev[2] {
                return Err(Error::arg(format!(
                    "level {} grid {:?} exceeds level {} grid {:?}",
                    k + 1,
                    &cur[1..],
                    k,
                    &prev[1..]
                )));
            }
        }
        Ok(FeaturePyramid { levels })
    }

    pub fn levels(&self) -> &[Tensor; 3] {
        &self.levels
    }

    pub fn into_levels(self) -> [Tensor; 3] {
        self.levels
    }

    pub fn channels(&self) -> [usize; 3] {
        [0, 1, 2].map(|k| self.levels[k].shape()[0])
    }

    pub fn total_channels(&self) -> usize {
        self.channels().iter().sum()
    }

    /// Spatial grid of the shallowest level.
    pub fn grid(&self) -> (usize, usize) {
        let s = self.levels[0].shape();
        (s[1], s[2])
    }
}

/// Selected patch embeddings of one image, `d × H′ × W′`, stored as f64.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVolume {
    data: Tensor,
    channel_indices: Vec<usize>,
}

impl EmbeddingVolume {
    pub fn new(data: Tensor, channel_indices: Vec<usize>) -> Result<Self> {
        if data.ndim() != 3 || data.as_f64().is_none() {
            return Err(Error::arg("embedding data must be an f64 d×H×W tensor"));
        }
        if data.shape()[0] != channel_indices.len() {
            return Err(Error::arg(format!(
                "{} channel indices for {} channels",
                channel_indices.len(),
                data.shape()[0]
            )));
        }
        let mut sorted = channel_indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != channel_indices.len() {
            return Err(Error::arg("channel indices must be distinct"));
        }
        Ok(EmbeddingVolume {
            data,
            channel_indices,
        })
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.data.shape()[1], self.data.shape()[2])
    }

    pub fn channel_indices(&self) -> &[usize] {
        &self.channel_indices
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    fn values(&self) -> &[f64] {
        self.data.as_f64().expect("checked in constructor")
    }

    /// Feature vector `x` at grid cell `(i, j)`.
    pub fn vector_at(&self, i: usize, j: usize) -> Vec<f64> {
        let (h, w) = self.grid();
        let plane = h * w;
        let v = self.values();
        (0..self.dim()).map(|c| v[c * plane + i * w + j]).collect()
    }

    /// Copies the volume into `(H′·W′) × d` location-major order.
    pub fn location_major(&self) -> Vec<f64> {
        let d = self.dim();
        let (h, w) = self.grid();
        let plane = h * w;
        let v = self.values();
        let mut out = vec![0.0; plane * d];
        for c in 0..d {
            for p in 0..plane {
                out[p * d + c] = v[c * plane + p];
            }
        }
        out
    }
}

/// Runs the fixed random three-level convolutional extractor on a single-band
/// image. Each level is a 3×3 reflect-padded convolution with Gaussian weights
/// (std `1/sqrt(9·C_in)`, no bias), ReLU and 2×2 average pooling.
pub fn toy_extract(image: &Tensor, seed: u64) -> Result<FeaturePyramid> {
    if image.ndim() != 2 {
        return Err(Error::arg(format!(
            "image must be H×W, got shape {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if h < 8 || w < 8 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::arg(format!(
            "image extents {h}×{w} must be at least 8 and divisible by 8"
        )));
    }

    let mut current = image.to_f64_vec();
    let (mut ch, mut hh, mut ww) = (1usize, h, w);
    let mut levels = Vec::with_capacity(3);
    for (k, &out_ch) in TOY_CHANNELS.iter().enumerate() {
        let weights = conv_weights(seed, k as u64, out_ch, ch)?;
        let conv = conv3x3_reflect_relu(&current, ch, hh, ww, &weights, out_ch);
        current = avg_pool2(&conv, out_ch, hh, ww);
        ch = out_ch;
        hh /= 2;
        ww /= 2;
        levels.push(Tensor::f32_from_f64(vec![ch, hh, ww], &current)?);
    }
    let levels: [Tensor; 3] = levels.try_into().expect("three levels");
    FeaturePyramid::new(levels)
}

fn conv_weights(seed: u64, layer: u64, out_ch: usize, in_ch: usize) -> Result<Vec<f64>> {
    let std = 1.0 / ((9 * in_ch) as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::Numeric(e.to_string()))?;
    let mut rng = RngStream::child(seed, layer);
    Ok((0..out_ch * in_ch * 9)
        .map(|_| normal.sample(&mut rng))
        .collect())
}

/// Mirror index without edge repetition (`d c b | a b c d | c b a`).
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

fn conv3x3_reflect_relu(
    input: &[f64],
    in_ch: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    out_ch: usize,
) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; out_ch * plane];
    for o in 0..out_ch {
        let dst = &mut out[o * plane..(o + 1) * plane];
        for c in 0..in_ch {
            let src = &input[c * plane..(c + 1) * plane];
            let k = &weights[(o * in_ch + c) * 9..(o * in_ch + c + 1) * 9];
            for i in 0..h {
                let rows = [
                    reflect_index(i as isize - 1, h),
                    i,
                    reflect_index(i as isize + 1, h),
                ];
                for j in 0..w {
                    let cols = [
                        reflect_index(j as isize - 1, w),
                        j,
                        reflect_index(j as isize + 1, w),
                    ];
                    let mut acc = 0.0;
                    for (ky, &r) in rows.iter().enumerate() {
                        for (kx, &col) in cols.iter().enumerate() {
                            acc += k[ky * 3 + kx] * src[r * w + col];
                        }
                    }
                    dst[i * w + j] += acc;
                }
            }
        }
        for v in dst.iter_mut() {
            *v = v.max(0.0);
        }
    }
    out
}

fn avg_pool2(input: &[f64], ch: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; ch * oh * ow];
    for c in 0..ch {
        let src = &input[c * h * w..(c + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let s = src[2 * i * w + 2 * j]
                    + src[2 * i * w + 2 * j + 1]
                    + src[(2 * i + 1) * w + 2 * j]
                    + src[(2 * i + 1) * w + 2 * j + 1];
                out[c * oh * ow + i * ow + j] = 0.25 * s;
            }
        }
    }
    out
}

/// Aligns deeper levels to the level-1 grid by nearest-neighbour sampling,
/// concatenates channels in level order and keeps `channel_indices`.
pub fn assemble_embedding(
    pyr: &FeaturePyramid,
    channel_indices: &[usize],
) -> Result<EmbeddingVolume> {
    let channels = pyr.channels();
    let total = pyr.total_channels();
    if let Some(&bad) = channel_indices.iter().find(|&&c| c >= total) {
        return Err(Error::arg(format!(
            "channel index {bad} out of range for {total} channels"
        )));
    }
    let (h, w) = pyr.grid();
    let plane = h * w;
    let levels: Vec<Vec<f64>> = pyr.levels().iter().map(Tensor::to_f64_vec).collect();

    let mut data = vec![0.0; channel_indices.len() * plane];
    for (out_c, &global) in channel_indices.iter().enumerate() {
        let (level, local) = locate_channel(global, &channels);
        let shape = pyr.levels()[level].shape();
        let (lh, lw) = (shape[1], shape[2]);
        let src = &levels[level][local * lh * lw..(local + 1) * lh * lw];
        let dst = &mut data[out_c * plane..(out_c + 1) * plane];
        for i in 0..h {
            let si = i * lh / h;
            for j in 0..w {
                let sj = j * lw / w;
                dst[i * w + j] = src[si * lw + sj];
            }
        }
    }
    EmbeddingVolume::new(
        Tensor::from_f64(vec![channel_indices.len(), h, w], data)?,
        channel_indices.to_vec(),
    )
}

fn locate_channel(global: usize, channels: &[usize; 3]) -> (usize, usize) {
    let mut offset = 0;
    for (level, &c) in channels.iter().enumerate() {
        if global < offset + c {
            return (level, global - offset);
        }
        offset += c;
    }
    unreachable!("index validated against total channel count")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    fn image(h: usize, w: usize) -> Tensor {
        let data = (0..h * w).map(|i| ((i * 37 % 101) as f32) / 50.0).collect();
        Tensor::from_f32(vec![h, w], data).unwrap()
    }

    #[test]
    fn toy_shapes() {
        let pyr = toy_extract(&image(64, 64), 3).unwrap();
        let shapes: Vec<Vec<usize>> = pyr.levels().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![16, 32, 32], vec![32, 16, 16], vec![64, 8, 8]]
        );
        assert_eq!(pyr.total_channels(), TOY_TOTAL_CHANNELS);
    }

    #[test]
    fn toy_zero_image_gives_zero_pyramid() {
        let pyr = toy_extract(&Tensor::zeros(vec![16, 24], DType::F32), 0).unwrap();
        for level in pyr.levels() {
            assert!(level.as_f32().unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn toy_is_deterministic_and_seeded() {
        let img = image(32, 32);
        assert_eq!(
            toy_extract(&img, 11).unwrap(),
            toy_extract(&img, 11).unwrap()
        );
        assert_ne!(
            toy_extract(&img, 11).unwrap(),
            toy_extract(&img, 12).unwrap()
        );
    }

    #[test]
    fn toy_rejects_bad_extents() {
        assert!(toy_extract(&image(60, 64), 0).is_err());
        assert!(toy_extract(&image(0, 0), 0).is_err());
    }

    #[test]
    fn reflect_indexing() {
        assert_eq!(reflect_index(-1, 4), 1);
        assert_eq!(reflect_index(4, 4), 2);
        assert_eq!(reflect_index(-5, 4), 1);
        assert_eq!(reflect_index(7, 4), 1);
        assert_eq!(reflect_index(3, 1), 0);
    }

    #[test]
    fn full_concatenation_and_passthrough() {
        let pyr = toy_extract(&image(16, 16), 1).unwrap();
        let all: Vec<usize> = (0..112).collect();
        let vol = assemble_embedding(&pyr, &all).unwrap();
        assert_eq!(vol.dim(), 112);
        assert_eq!(vol.grid(), pyr.grid());

        let first = assemble_embedding(&pyr, &[0]).unwrap();
        let level1: Vec<f64> = pyr.levels()[0].to_f64_vec()[..64].to_vec();
        assert_eq!(first.data().as_f64().unwrap(), level1.as_slice());
    }

    #[test]
    fn nearest_neighbour_replication() {
        // channels (1,1,1) with grids 2×2, 2×2, 1×1
        let l1 = Tensor::from_f32(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let l2 = Tensor::from_f32(vec![1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let l3 = Tensor::from_f32(vec![1, 1, 1], vec![9.0]).unwrap();
        let pyr = FeaturePyramid::new([l1, l2, l3]).unwrap();
        let vol = assemble_embedding(&pyr, &[2, 0]).unwrap();
        assert_eq!(
            vol.data().as_f64().unwrap(),
            &[9.0, 9.0, 9.0, 9.0, 1.0, 2.0, 3.0, 4.0]
        );
        assert_eq!(vol.vector_at(1, 0), vec![9.0, 3.0]);
    }

    #[test]
    fn out_of_range_index() {
        let pyr = toy_extract(&image(8, 8), 1).unwrap();
        assert!(matches!(
            assemble_embedding(&pyr, &[112]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn pyramid_rejects_growing_levels() {
        let small = Tensor::zeros(vec![1, 2, 2], DType::F32);
        let big = Tensor::zeros(vec![1, 4, 4], DType::F32);
        assert!(FeaturePyramid::new([small.clone(), big, small]).is_err());
    }

    #[test]
    fn selection_commutes_with_location() {
        let pyr = toy_extract(&image(32, 16), 5).unwrap();
        let all: Vec<usize> = (0..112).collect();
        let idx = crate::rng::choose_channel_indices(&mut RngStream::new(2), 112, 30).unwrap();
        let full = assemble_embedding(&pyr, &all).unwrap();
        let sel = assemble_embedding(&pyr, &idx).unwrap();
        let (h, w) = sel.grid();
        for i in 0..h {
            for j in 0..w {
                let fv = full.vector_at(i, j);
                let expected: Vec<f64> = idx.iter().map(|&c| fv[c]).collect();
                assert_eq!(sel.vector_at(i, j), expected);
            }
        }
        // nearest-neighbour alignment introduces no new values
        for c in 0..112 {
            let (level, local) = locate_channel(c, &pyr.channels());
            let src = pyr.levels()[level].to_f64_vec();
            let s = pyr.levels()[level].shape();
            let plane = &src[local * s[1] * s[2]..(local + 1) * s[1] * s[2]];
            let up = &full.data().as_f64().unwrap()[c * h * w..(c + 1) * h * w];
            let mm = |v: &[f64]| {
                (
                    v.iter().cloned().fold(f64::INFINITY, f64::min),
                    v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                )
            };
            assert_eq!(mm(plane), mm(up));
        }
    }
}

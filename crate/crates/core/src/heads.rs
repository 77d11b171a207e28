//! Center-style prediction heads, box decoding, and the training objective
//! (focal + L1 + GIoU).

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Space};
use crate::nn::{sigmoid, Conv2d, Group, ParamStore};

/// Lower/upper clamp applied to classification probabilities inside the model.
pub const CLS_CLAMP: f64 = 1e-4;
/// Width of the classification target in grid cells.
pub const TARGET_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: [usize; 2],
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: [64, 32] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// L1 weight.
    pub lambda1: f64,
    /// GIoU weight.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 5.0,
            lambda2: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0) {
            return Err(Error::config("loss.lambda1", "must be nonnegative"));
        }
        if !(self.lambda2 >= 0.0) {
            return Err(Error::config("loss.lambda2", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Dense outputs over the `H_f x W_f` search grid.
#[derive(Debug, Clone)]
pub struct PredictionMaps {
    /// `(B, H, W)` target probability.
    pub cls: Tensor,
    /// `(B, 2, H, W)` sub-cell center offset (x, y).
    pub offset: Tensor,
    /// `(B, 2, H, W)` normalized box size (w, h).
    pub size: Tensor,
}

impl PredictionMaps {
    pub fn batch(&self) -> Result<usize> {
        Ok(self.cls.dim(0)?)
    }

    pub fn grid(&self) -> Result<(usize, usize)> {
        let (_, h, w) = self.cls.dims3()?;
        Ok((h, w))
    }

    /// Keeps the listed batch rows.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let idx = Tensor::new(rows.iter().map(|&r| r as u32).collect::<Vec<_>>(), self.cls.device())?;
        Ok(Self {
            cls: self.cls.index_select(&idx, 0)?,
            offset: self.offset.index_select(&idx, 0)?,
            size: self.size.index_select(&idx, 0)?,
        })
    }

    /// Flattened classification scores per batch element, row-major.
    pub fn cls_rows(&self) -> Result<Vec<Vec<f32>>> {
        let (b, h, w) = self.cls.dims3()?;
        let flat = self.cls.to_dtype(DType::F32)?.reshape((b, h * w))?;
        Ok(flat.to_vec2::<f32>()?)
    }
}

#[derive(Debug, Clone)]
struct ConvStack {
    layers: Vec<Conv2d>,
}

impl ConvStack {
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        hidden: [usize; 2],
        out_ch: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let g = Group::Rest;
        Ok(Self {
            layers: vec![
                Conv2d::new(store, &format!("{name}.0"), in_ch, hidden[0], 3, g, rng)?,
                Conv2d::new(store, &format!("{name}.1"), hidden[0], hidden[1], 3, g, rng)?,
                Conv2d::new(store, &format!("{name}.2"), hidden[1], out_ch, 1, g, rng)?,
            ],
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct PredictionHead {
    cls: ConvStack,
    offset: ConvStack,
    size: ConvStack,
    grid: usize,
}

impl PredictionHead {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        embed_dim: usize,
        grid: usize,
        cfg: &HeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let cls = ConvStack::new(store, &format!("{name}.cls"), embed_dim, cfg.hidden, 1, rng)?;
        // prior probability of 0.1 for the target class
        let last = format!("{name}.cls.2");
        let cls = ConvStack {
            layers: {
                let mut l = cls.layers;
                let c = l.pop().expect("three layers");
                l.push(c.with_bias_value(store, &last, -(0.9f64 / 0.1).ln())?);
                l
            },
        };
        Ok(Self {
            cls,
            offset: ConvStack::new(store, &format!("{name}.offset"), embed_dim, cfg.hidden, 2, rng)?,
            size: ConvStack::new(store, &format!("{name}.size"), embed_dim, cfg.hidden, 2, rng)?,
            grid,
        })
    }

    /// `(B, N_s, D)` search features -> dense maps.
    pub fn predict(&self, f_x: &Tensor) -> Result<PredictionMaps> {
        let (b, n, d) = f_x.dims3()?;
        if n != self.grid * self.grid {
            return Err(Error::Shape(format!("{n} tokens do not form a {0}x{0} grid", self.grid)));
        }
        let fmap = f_x.transpose(1, 2)?.reshape((b, d, self.grid, self.grid))?;
        let cls = sigmoid(&self.cls.forward(&fmap)?)?
            .clamp(CLS_CLAMP, 1.0 - CLS_CLAMP)?
            .squeeze(1)?;
        let offset = sigmoid(&self.offset.forward(&fmap)?)?;
        let size = sigmoid(&self.size.forward(&fmap)?)?;
        Ok(PredictionMaps { cls, offset, size })
    }
}

/// Index of the maximum, ties resolved toward the smallest index.
pub fn argmax_first(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Row-major peak cell of every classification map in the batch.
pub fn peak_cells(maps: &PredictionMaps) -> Result<Vec<usize>> {
    Ok(maps.cls_rows()?.iter().map(|row| argmax_first(row)).collect())
}

/// Box read out at each given cell as a differentiable `(B, 4)` tensor of
/// crop-normalized `(cx, cy, w, h)`.
pub fn box_at_cells(maps: &PredictionMaps, cells: &[usize]) -> Result<Tensor> {
    let (b, h, w) = maps.cls.dims3()?;
    if cells.len() != b {
        return Err(Error::Shape(format!("{} cells for batch of {b}", cells.len())));
    }
    let dev = maps.cls.device();
    let dtype = maps.offset.dtype();
    let idx: Vec<u32> = cells.iter().flat_map(|&c| [c as u32, c as u32]).collect();
    let idx = Tensor::from_vec(idx, (b, 2, 1), dev)?;
    let off = maps.offset.reshape((b, 2, h * w))?.gather(&idx, 2)?.squeeze(2)?;
    let size = maps.size.reshape((b, 2, h * w))?.gather(&idx, 2)?.squeeze(2)?;
    let mut base = Vec::with_capacity(2 * b);
    for &c in cells {
        base.push((c % w) as f64);
        base.push((c / w) as f64);
    }
    let base = Tensor::from_vec(base, (b, 2), dev)?.to_dtype(dtype)?;
    let scale = Tensor::new(&[1.0 / w as f64, 1.0 / h as f64], dev)?.to_dtype(dtype)?;
    let center = (off + base)?.broadcast_mul(&scale)?;
    Ok(Tensor::cat(&[center, size], 1)?)
}

/// Hard-argmax decode of every map in the batch.
pub fn decode_box(maps: &PredictionMaps) -> Result<Vec<BBox>> {
    let cells = peak_cells(maps)?;
    let boxes = box_at_cells(maps, &cells)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    boxes
        .into_iter()
        .map(|p| {
            if p.iter().all(|v| v.is_finite()) {
                Ok(BBox::new(p[0], p[1], p[2], p[3], Space::CropNormalized))
            } else {
                Err(Error::Numeric(format!("non-finite box prediction {p:?}")))
            }
        })
        .collect()
}

/// Gaussian classification target for one crop-normalized box.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterTarget {
    /// Row-major `H x W` map with a unit peak.
    pub map: Vec<f32>,
    pub peak: usize,
}

pub fn gaussian_target(gt: &BBox, grid: usize) -> Result<CenterTarget> {
    if gt.space != Space::CropNormalized {
        return Err(Error::SpaceMismatch(gt.space, Space::CropNormalized));
    }
    let g = grid as f64;
    let pc = ((gt.cx * g).floor()).clamp(0.0, g - 1.0);
    let pr = ((gt.cy * g).floor()).clamp(0.0, g - 1.0);
    let mut map = Vec::with_capacity(grid * grid);
    for r in 0..grid {
        for c in 0..grid {
            let d2 = (c as f64 - pc).powi(2) + (r as f64 - pr).powi(2);
            map.push((-d2 / (2.0 * TARGET_SIGMA * TARGET_SIGMA)).exp() as f32);
        }
    }
    Ok(CenterTarget {
        map,
        peak: pr as usize * grid + pc as usize,
    })
}

/// Stacks per-sample targets into a `(B, H, W)` tensor.
pub fn target_tensor(targets: &[CenterTarget], grid: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let flat: Vec<f32> = targets.iter().flat_map(|t| t.map.iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (targets.len(), grid, grid), device)?.to_dtype(dtype)?)
}

/// Boxes as a `(B, 4)` tensor of `(cx, cy, w, h)`.
pub fn boxes_tensor(boxes: &[BBox], dtype: DType, device: &Device) -> Result<Tensor> {
    let flat: Vec<f64> = boxes.iter().flat_map(|b| b.params()).collect();
    Ok(Tensor::from_vec(flat, (boxes.len(), 4), device)?.to_dtype(dtype)?)
}

const LOG_FLOOR: f64 = 1e-12;

/// Penalty-reduced focal loss (alpha 2, beta 4) normalized by the number of
/// positive cells. Positives are cells where the target equals one.
pub fn focal_loss(cls: &Tensor, target: &Tensor) -> Result<Tensor> {
    if cls.dims() != target.dims() {
        return Err(Error::Shape(format!("cls {:?} vs target {:?}", cls.dims(), target.dims())));
    }
    let dtype = cls.dtype();
    let pos = target.ge(1.0)?.to_dtype(dtype)?;
    let neg = (pos.ones_like()? - &pos)?;
    let num_pos = pos.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if num_pos == 0.0 {
        return Err(Error::InvalidArgument("focal loss target has no positive cell".into()));
    }
    let one_minus_p = cls.affine(-1.0, 1.0)?;
    let log_p = cls.clamp(LOG_FLOOR, 1.0)?.log()?;
    let log_1mp = one_minus_p.clamp(LOG_FLOOR, 1.0)?.log()?;
    let pos_term = (one_minus_p.sqr()? * log_p)?.mul(&pos)?.sum_all()?;
    let neg_weight = target.affine(-1.0, 1.0)?.sqr()?.sqr()?;
    let neg_term = (neg_weight * cls.sqr()? * log_1mp)?.mul(&neg)?.sum_all()?;
    Ok(((pos_term + neg_term)? * (-1.0 / num_pos))?)
}

/// Mean absolute error over all box parameters.
pub fn l1_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    Ok((pred - gt)?.abs()?.mean_all()?)
}

/// Per-row GIoU of `(B, 4)` center-size boxes.
pub fn giou_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let corners = |t: &Tensor| -> Result<[Tensor; 4]> {
        let c = t.narrow(1, 0, 2)?;
        let half = (t.narrow(1, 2, 2)? * 0.5)?;
        let lo = (&c - &half)?;
        let hi = (&c + &half)?;
        Ok([lo.narrow(1, 0, 1)?, lo.narrow(1, 1, 1)?, hi.narrow(1, 0, 1)?, hi.narrow(1, 1, 1)?])
    };
    let [ax0, ay0, ax1, ay1] = corners(a)?;
    let [bx0, by0, bx1, by1] = corners(b)?;
    let iw = (ax1.minimum(&bx1)? - ax0.maximum(&bx0)?)?.relu()?;
    let ih = (ay1.minimum(&by1)? - ay0.maximum(&by0)?)?.relu()?;
    let inter = (iw * ih)?;
    let area_a = ((&ax1 - &ax0)? * (&ay1 - &ay0)?)?;
    let area_b = ((&bx1 - &bx0)? * (&by1 - &by0)?)?;
    let union = ((area_a + area_b)? - &inter)?;
    let hull = ((ax1.maximum(&bx1)? - ax0.minimum(&bx0)?)? * (ay1.maximum(&by1)? - ay0.minimum(&by0)?)?)?;
    let iou = (inter / &union)?;
    let penalty = ((&hull - &union)? / &hull)?;
    Ok((iou - penalty)?.squeeze(1)?)
}

/// Mean of `1 - GIoU`.
pub fn giou_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    Ok(giou_tensor(pred, gt)?.affine(-1.0, 1.0)?.mean_all()?)
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub cls: Tensor,
    pub l1: Tensor,
    pub giou: Tensor,
}

impl LossTerms {
    pub fn scalars(&self) -> Result<[f64; 4]> {
        let s = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok([s(&self.total)?, s(&self.cls)?, s(&self.l1)?, s(&self.giou)?])
    }
}

/// `focal + lambda1 * L1 + lambda2 * (1 - GIoU)`.
pub fn total_loss(pred_box: &Tensor, gt_box: &Tensor, cls: &Tensor, target: &Tensor, weights: &LossWeights) -> Result<LossTerms> {
    let cls_term = focal_loss(cls, target)?;
    let l1 = l1_loss(pred_box, gt_box)?;
    let giou = giou_loss(pred_box, gt_box)?;
    let total = ((&cls_term + (&l1 * weights.lambda1)?)? + (&giou * weights.lambda2)?)?;
    Ok(LossTerms {
        total,
        cls: cls_term,
        l1,
        giou,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry;

    fn dev() -> Device {
        Device::Cpu
    }

    fn maps_from(cls: Vec<f64>, offset: Vec<f64>, size: Vec<f64>, g: usize) -> PredictionMaps {
        PredictionMaps {
            cls: Tensor::from_vec(cls, (1, g, g), &dev()).unwrap(),
            offset: Tensor::from_vec(offset, (1, 2, g, g), &dev()).unwrap(),
            size: Tensor::from_vec(size, (1, 2, g, g), &dev()).unwrap(),
        }
    }

    #[test]
    fn decode_one_hot_corner_cell() {
        let g = 8;
        let mut cls = vec![0.0; 64];
        cls[0] = 1.0;
        let maps = maps_from(cls, vec![0.5; 128], vec![0.25; 128], g);
        let b = decode_box(&maps).unwrap()[0];
        assert!((b.cx - 0.0625).abs() < 1e-15);
        assert!((b.cy - 0.0625).abs() < 1e-15);
        assert_eq!((b.w, b.h), (0.25, 0.25));
        assert_eq!(b.space, Space::CropNormalized);
    }

    #[test]
    fn decode_uniform_ties_to_first_cell() {
        let maps = maps_from(vec![0.3; 16], vec![0.0; 32], vec![0.1; 32], 4);
        assert_eq!(peak_cells(&maps).unwrap(), vec![0]);
    }

    #[test]
    fn decode_reads_offset_and_size_at_peak() {
        let g = 4;
        let mut cls = vec![0.1; 16];
        cls[6] = 0.9; // row 1, col 2
        let mut offset = vec![0.0; 32];
        offset[6] = 0.25;
        offset[16 + 6] = 0.75;
        let mut size = vec![0.0; 32];
        size[6] = 0.3;
        size[16 + 6] = 0.4;
        let b = decode_box(&maps_from(cls, offset, size, g)).unwrap()[0];
        assert!((b.cx - 2.25 / 4.0).abs() < 1e-15);
        assert!((b.cy - 1.75 / 4.0).abs() < 1e-15);
        assert_eq!((b.w, b.h), (0.3, 0.4));
    }

    #[test]
    fn argmax_invariant_under_monotone_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let v: Vec<f32> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
            let a = argmax_first(&v);
            let scaled: Vec<f32> = v.iter().map(|x| x * 3.5).collect();
            let cubed: Vec<f32> = v.iter().map(|x| x * x * x + 2.0 * x).collect();
            assert_eq!(argmax_first(&scaled), a);
            assert_eq!(argmax_first(&cubed), a);
        }
    }

    #[test]
    fn head_shapes_and_range() {
        let mut store = ParamStore::new(DType::F32, dev());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = PredictionHead::new(&mut store, "head", 16, 8, &HeadConfig::default(), &mut rng).unwrap();
        let v: Vec<f32> = (0..2 * 64 * 16).map(|_| rng.random_range(-3.0..3.0)).collect();
        let f = Tensor::from_vec(v, (2, 64, 16), &dev()).unwrap();
        let m = head.predict(&f).unwrap();
        assert_eq!(m.cls.dims(), &[2, 8, 8]);
        assert_eq!(m.offset.dims(), &[2, 2, 8, 8]);
        assert_eq!(m.size.dims(), &[2, 2, 8, 8]);
        for row in m.cls_rows().unwrap() {
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        let again = head.predict(&f).unwrap();
        assert_eq!(again.cls_rows().unwrap(), m.cls_rows().unwrap());
        assert!(head.predict(&f.narrow(1, 0, 60).unwrap()).is_err());
    }

    #[test]
    fn gaussian_target_has_unit_peak_at_center_cell() {
        let t = gaussian_target(&BBox::crop(0.3, 0.8, 0.1, 0.1), 8).unwrap();
        assert_eq!(t.peak, 6 * 8 + 2);
        assert_eq!(t.map[t.peak], 1.0);
        assert_eq!(t.map.iter().filter(|&&v| v >= 1.0).count(), 1);
        let right = t.map[t.peak + 1] as f64;
        assert!((right - (-0.5f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn focal_loss_vanishes_for_one_hot_prediction() {
        let mut target = vec![0.0f64; 16];
        target[5] = 1.0;
        let mut cls = vec![0.0f64; 16];
        cls[5] = 1.0 - 1e-7;
        let t = Tensor::from_vec(target, (1, 4, 4), &dev()).unwrap();
        let c = Tensor::from_vec(cls, (1, 4, 4), &dev()).unwrap();
        let l = focal_loss(&c, &t).unwrap().to_scalar::<f64>().unwrap();
        assert!((0.0..=1e-6).contains(&l), "{l}");
    }

    #[test]
    fn focal_loss_requires_a_positive() {
        let t = Tensor::full(0.5f64, (1, 2, 2), &dev()).unwrap();
        assert!(focal_loss(&t, &t).is_err());
    }

    /// Direct scalar evaluation of the penalty-reduced focal loss.
    fn focal_oracle(cls: &[f64], target: &[f64]) -> f64 {
        let mut pos = 0.0;
        let mut n = 0.0;
        let mut neg = 0.0;
        for (&p, &y) in cls.iter().zip(target) {
            if y == 1.0 {
                pos += (1.0 - p).powi(2) * p.ln();
                n += 1.0;
            } else {
                neg += (1.0 - y).powi(4) * p.powi(2) * (1.0 - p).ln();
            }
        }
        -(pos + neg) / n
    }

    #[test]
    fn focal_loss_matches_scalar_oracle_on_2x2() {
        let cls = vec![0.7, 0.2, 0.05, 0.4];
        let target = vec![1.0, 0.6065306597126334, 0.36787944117144233, 0.6065306597126334];
        let expected = focal_oracle(&cls, &target);
        let got = focal_loss(
            &Tensor::from_vec(cls, (1, 2, 2), &dev()).unwrap(),
            &Tensor::from_vec(target, (1, 2, 2), &dev()).unwrap(),
        )
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
        assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
    }

    #[test]
    fn giou_tensor_matches_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut a = vec![];
        let mut b = vec![];
        for _ in 0..200 {
            a.push(BBox::crop(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.01..0.5), rng.random_range(0.01..0.5)));
            b.push(BBox::crop(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.01..0.5), rng.random_range(0.01..0.5)));
        }
        let g = giou_tensor(&boxes_tensor(&a, DType::F64, &dev()).unwrap(), &boxes_tensor(&b, DType::F64, &dev()).unwrap())
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        for i in 0..a.len() {
            assert!((g[i] - geometry::giou(&a[i], &b[i]).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_prediction_total_loss_vanishes() {
        let gt = BBox::crop(0.4, 0.55, 0.2, 0.3);
        let t = gaussian_target(&gt, 8).unwrap();
        let mut cls = vec![0.0f64; 64];
        cls[t.peak] = 1.0 - 1e-7;
        let cls = Tensor::from_vec(cls, (1, 8, 8), &dev()).unwrap();
        let target = target_tensor(&[t], 8, DType::F64, &dev()).unwrap();
        let bx = boxes_tensor(&[gt], DType::F64, &dev()).unwrap();
        let terms = total_loss(&bx, &bx, &cls, &target, &LossWeights::default()).unwrap();
        let [total, ..] = terms.scalars().unwrap();
        assert!((0.0..=1e-6).contains(&total), "{total}");
    }

    #[test]
    fn total_loss_is_sum_of_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = BBox::crop(0.45, 0.5, 0.2, 0.25);
        let pred = BBox::crop(0.5, 0.42, 0.3, 0.2);
        let t = gaussian_target(&gt, 4).unwrap();
        let cls: Vec<f64> = (0..16).map(|_| rng.random_range(0.01..0.99)).collect();
        let cls_t = Tensor::from_vec(cls.clone(), (1, 4, 4), &dev()).unwrap();
        let target = target_tensor(&[t.clone()], 4, DType::F64, &dev()).unwrap();
        let w = LossWeights { lambda1: 5.0, lambda2: 2.0 };
        let pt = boxes_tensor(&[pred], DType::F64, &dev()).unwrap();
        let gtt = boxes_tensor(&[gt], DType::F64, &dev()).unwrap();
        let [total, c, l1, gl] = total_loss(&pt, &gtt, &cls_t, &target, &w).unwrap().scalars().unwrap();
        let target_f64: Vec<f64> = t.map.iter().map(|&v| v as f64).collect();
        let c_ref = focal_oracle(&cls, &target_f64);
        let l1_ref = pred.params().iter().zip(gt.params()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 4.0;
        let g_ref = 1.0 - geometry::giou(&pred, &gt).unwrap();
        assert!((c - c_ref).abs() < 1e-12);
        assert!((l1 - l1_ref).abs() < 1e-15);
        assert!((gl - g_ref).abs() < 1e-14);
        assert!((total - (c + 5.0 * l1 + 2.0 * gl)).abs() < 1e-12);
        let zero = LossWeights { lambda1: 0.0, lambda2: 0.0 };
        let [total0, c0, ..] = total_loss(&pt, &gtt, &cls_t, &target, &zero).unwrap().scalars().unwrap();
        assert_eq!(total0, c0);
    }
}

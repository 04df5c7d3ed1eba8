//! Random Block Shuffle.
//!
//! An image is cut into `k` column strips which are permuted, then the result
//! is cut into `k` row strips which are permuted. Every channel moves with its
//! pixel. The transform is a pure spatial permutation, so it is exactly
//! invertible and preserves the pixel multiset.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

/// How cut positions are chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Uniform over all sets of `k - 1` distinct cut positions.
    #[default]
    Random,
    /// Cuts at `round(i * len / k)`.
    EqualWidth,
}

/// One concrete shuffle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RbsPlan {
    pub k: usize,
    pub height: usize,
    pub width: usize,
    /// `k - 1` strictly increasing cut columns in `[1, width - 1]`.
    pub col_cuts: Vec<usize>,
    /// Output column block `j` is input column block `col_perm[j]`.
    pub col_perm: Vec<usize>,
    pub row_cuts: Vec<usize>,
    pub row_perm: Vec<usize>,
    pub seed: u64,
}

fn check_k(height: usize, width: usize, k: usize) -> Result<()> {
    if k == 0 || k > height.min(width) {
        return Err(Error::invalid(format!(
            "block count {k} outside [1, {}] for a {height}x{width} image",
            height.min(width)
        )));
    }
    Ok(())
}

fn sample_cuts(rng: &mut impl Rng, len: usize, k: usize, mode: SplitMode) -> Vec<usize> {
    match mode {
        SplitMode::Random => {
            let mut cuts: Vec<usize> = index::sample(rng, len - 1, k - 1).into_iter().map(|c| c + 1).collect();
            cuts.sort_unstable();
            cuts
        }
        SplitMode::EqualWidth => (1..k).map(|i| ((i * len) as f64 / k as f64).round() as usize).collect(),
    }
}

fn sample_perm(rng: &mut impl Rng, k: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..k).collect();
    perm.shuffle(rng);
    perm
}

/// For each output position along one axis, the source position.
fn axis_map(len: usize, cuts: &[usize], perm: &[usize]) -> Vec<usize> {
    let mut bounds = Vec::with_capacity(cuts.len() + 2);
    bounds.push(0);
    bounds.extend_from_slice(cuts);
    bounds.push(len);
    perm.iter().flat_map(|&b| bounds[b]..bounds[b + 1]).collect()
}

impl RbsPlan {
    /// Draws a plan seed from `rng` and expands it with [`RbsPlan::from_seed`].
    pub fn sample(rng: &mut impl Rng, height: usize, width: usize, k: usize) -> Result<Self> {
        Self::sample_with(rng, height, width, k, SplitMode::Random)
    }

    pub fn sample_with(rng: &mut impl Rng, height: usize, width: usize, k: usize, mode: SplitMode) -> Result<Self> {
        check_k(height, width, k)?;
        Self::from_seed(rng.random(), height, width, k, mode)
    }

    /// The plan is a deterministic function of its seed.
    pub fn from_seed(seed: u64, height: usize, width: usize, k: usize, mode: SplitMode) -> Result<Self> {
        check_k(height, width, k)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let col_cuts = sample_cuts(&mut rng, width, k, mode);
        let col_perm = sample_perm(&mut rng, k);
        let row_cuts = sample_cuts(&mut rng, height, k, mode);
        let row_perm = sample_perm(&mut rng, k);
        Ok(Self {
            k,
            height,
            width,
            col_cuts,
            col_perm,
            row_cuts,
            row_perm,
            seed,
        })
    }

    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            k: 1,
            height,
            width,
            col_cuts: vec![],
            col_perm: vec![0],
            row_cuts: vec![],
            row_perm: vec![0],
            seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.col_perm.iter().enumerate().all(|(i, &p)| i == p) && self.row_perm.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn validate(&self) -> Result<()> {
        check_k(self.height, self.width, self.k)?;
        let cuts_ok = |cuts: &[usize], len: usize| {
            cuts.len() == self.k - 1
                && cuts.windows(2).all(|w| w[0] < w[1])
                && cuts.first().is_none_or(|&c| c >= 1)
                && cuts.last().is_none_or(|&c| c < len)
        };
        let perm_ok = |perm: &[usize]| {
            let mut seen = vec![false; self.k];
            perm.len() == self.k && perm.iter().all(|&p| p < self.k && !std::mem::replace(&mut seen[p], true))
        };
        if !cuts_ok(&self.col_cuts, self.width) || !cuts_ok(&self.row_cuts, self.height) {
            return Err(Error::invalid(format!("invalid cut positions in plan {self}")));
        }
        if !perm_ok(&self.col_perm) || !perm_ok(&self.row_perm) {
            return Err(Error::invalid(format!("invalid permutation in plan {self}")));
        }
        Ok(())
    }

    pub fn col_map(&self) -> Vec<usize> {
        axis_map(self.width, &self.col_cuts, &self.col_perm)
    }

    pub fn row_map(&self) -> Vec<usize> {
        axis_map(self.height, &self.row_cuts, &self.row_perm)
    }

    /// Flat source index (within one `height x width` plane) of every output
    /// pixel.
    ///
    /// The row shuffle acts on the column-shuffled intermediate, but since the
    /// two act on different axes the composite is `out[r][c] = in[row_map[r]][col_map[c]]`.
    pub fn pixel_map(&self) -> Vec<usize> {
        let (rows, cols) = (self.row_map(), self.col_map());
        rows.iter()
            .flat_map(|&r| cols.iter().map(move |&c| r * self.width + c))
            .collect()
    }

    fn check_image<T: Real>(&self, image: &Tensor<T>) -> Result<()> {
        let s = image.shape();
        let ok = match s.len() {
            2 => s == [self.height, self.width],
            3 | 4 => s[s.len() - 2..] == [self.height, self.width],
            _ => false,
        };
        if !ok {
            return Err(Error::shape(
                "rbs",
                format!("plan is {}x{}, image is {s:?}", self.height, self.width),
            ));
        }
        Ok(())
    }

    /// Applies the plan to an `[H, W]`, `[C, H, W]` or single-image
    /// `[1, C, H, W]` tensor.
    pub fn apply<T: Real>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(image)?;
        let map = self.pixel_map();
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(image.len());
        for src in image.data().chunks(plane) {
            out.extend(map.iter().map(|&i| src[i]));
        }
        Tensor::new(image.shape().to_vec(), out)
    }

    pub fn invert<T: Real>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(image)?;
        let map = self.pixel_map();
        let plane = self.height * self.width;
        let mut out = vec![T::zero(); image.len()];
        for (dst, src) in out.chunks_mut(plane).zip(image.data().chunks(plane)) {
            for (o, &i) in map.iter().enumerate() {
                dst[i] = src[o];
            }
        }
        Tensor::new(image.shape().to_vec(), out)
    }
}

impl fmt::Display for RbsPlan {
    /// `k=2 hw=28x28 cols=13 colperm=1,0 rows=9 rowperm=0,1 seed=42`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        write!(
            f,
            "k={} hw={}x{} cols={} colperm={} rows={} rowperm={} seed={}",
            self.k,
            self.height,
            self.width,
            join(&self.col_cuts),
            join(&self.col_perm),
            join(&self.row_cuts),
            join(&self.row_perm),
            self.seed
        )
    }
}

impl FromStr for RbsPlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |d: String| Error::format("rbs plan", d);
        let mut fields = std::collections::HashMap::new();
        for tok in s.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| bad(format!("token {tok:?}")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(format!("missing {k}")));
        let num = |v: &str| v.parse::<usize>().map_err(|e| bad(format!("{v:?}: {e}")));
        let list = |v: &str| -> Result<Vec<usize>> {
            if v.is_empty() {
                Ok(vec![])
            } else {
                v.split(',').map(num).collect()
            }
        };
        let (h, w) = get("hw")?.split_once('x').ok_or_else(|| bad("hw".into()))?;
        let plan = RbsPlan {
            k: num(get("k")?)?,
            height: num(h)?,
            width: num(w)?,
            col_cuts: list(get("cols")?)?,
            col_perm: list(get("colperm")?)?,
            row_cuts: list(get("rows")?)?,
            row_perm: list(get("rowperm")?)?,
            seed: get("seed")?.parse().map_err(|e| bad(format!("seed: {e}")))?,
        };
        plan.validate()?;
        Ok(plan)
    }
}

/// Shuffles every image of an `[N, C, H, W]` batch with its own plan.
pub fn apply_batch<T: Real>(
    rng: &mut impl Rng,
    images: &Tensor<T>,
    k: usize,
    mode: SplitMode,
) -> Result<(Tensor<T>, Vec<RbsPlan>)> {
    let (h, w) = batch_dims(images)?;
    let plans = (0..images.batch())
        .map(|_| RbsPlan::sample_with(rng, h, w, k, mode))
        .collect::<Result<Vec<_>>>()?;
    let out = apply_plans(&plans, images)?;
    Ok((out, plans))
}

/// Re-applies recorded plans, one per image.
pub fn apply_plans<T: Real>(plans: &[RbsPlan], images: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = batch_dims(images)?;
    if plans.len() != images.batch() {
        return Err(Error::shape(
            "rbs",
            format!("{} plans for batch of {}", plans.len(), images.batch()),
        ));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(images.len());
    for (i, plan) in plans.iter().enumerate() {
        if plan.height != h || plan.width != w {
            return Err(Error::shape("rbs", format!("plan {plan} on {h}x{w} batch")));
        }
        let map = plan.pixel_map();
        for src in images.row(i).chunks(plane) {
            out.extend(map.iter().map(|&j| src[j]));
        }
    }
    Tensor::new(images.shape().to_vec(), out)
}

fn batch_dims<T: Real>(images: &Tensor<T>) -> Result<(usize, usize)> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::shape("rbs", format!("expected [N, C, H, W], got {s:?}")));
    }
    Ok((s[2], s[3]))
}

/// Flattened source indices that realize `plans` on an `[N, C, H, W]` batch,
/// suitable for a graph `gather`.
pub fn batch_gather_indices(plans: &[RbsPlan], shape: &[usize]) -> Vec<usize> {
    let (c, plane) = (shape[1], shape[2] * shape[3]);
    let mut idx = Vec::with_capacity(shape.iter().product());
    for (n, plan) in plans.iter().enumerate() {
        let map = plan.pixel_map();
        for ch in 0..c {
            let base = (n * c + ch) * plane;
            idx.extend(map.iter().map(|&j| base + j));
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_double_swap() {
        let plan = RbsPlan {
            k: 2,
            height: 2,
            width: 2,
            col_cuts: vec![1],
            col_perm: vec![1, 0],
            row_cuts: vec![1],
            row_perm: vec![1, 0],
            seed: 0,
        };
        plan.validate().unwrap();
        // a b / c d
        let img = Tensor::<f64>::from_f64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = plan.apply(&img).unwrap();
        // d c / b a
        assert_eq!(out.data(), &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(plan.invert(&out).unwrap(), img);
    }

    #[test]
    fn k_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plan = RbsPlan::sample(&mut rng, 5, 7, 1).unwrap();
        assert!(plan.col_cuts.is_empty() && plan.row_cuts.is_empty());
        assert!(plan.is_identity());
        let img = Tensor::<f32>::from_fn(&[3, 5, 7], |i| i as f32);
        assert_eq!(plan.apply(&img).unwrap(), img);
    }

    #[test]
    fn k_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(RbsPlan::sample(&mut rng, 4, 8, 0).is_err());
        assert!(RbsPlan::sample(&mut rng, 4, 8, 5).is_err());
        assert!(RbsPlan::sample(&mut rng, 4, 8, 4).is_ok());
    }

    #[test]
    fn dimension_mismatch() {
        let plan = RbsPlan::from_seed(1, 4, 4, 2, SplitMode::Random).unwrap();
        let img = Tensor::<f32>::zeros(&[1, 4, 5]);
        assert!(plan.apply(&img).is_err());
        assert!(plan.invert(&img).is_err());
    }

    #[test]
    fn same_seed_same_plan() {
        let a = RbsPlan::sample(&mut ChaCha8Rng::seed_from_u64(11), 16, 16, 3).unwrap();
        let b = RbsPlan::sample(&mut ChaCha8Rng::seed_from_u64(11), 16, 16, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn equal_width_cuts() {
        let plan = RbsPlan::from_seed(5, 9, 12, 3, SplitMode::EqualWidth).unwrap();
        assert_eq!(plan.col_cuts, vec![4, 8]);
        assert_eq!(plan.row_cuts, vec![3, 6]);
    }

    #[test]
    fn text_line_round_trip() {
        let plan = RbsPlan::from_seed(99, 28, 28, 3, SplitMode::Random).unwrap();
        let line = plan.to_string();
        assert_eq!(line.parse::<RbsPlan>().unwrap(), plan);
        assert!("k=2 hw=4x4 cols=1 colperm=0,0 rows=2 rowperm=1,0 seed=1".parse::<RbsPlan>().is_err());
        let identity = RbsPlan::identity(3, 3).to_string();
        assert_eq!(identity.parse::<RbsPlan>().unwrap(), RbsPlan::identity(3, 3));
    }
}

//! Conditional positional encoding by depthwise 3×3 convolution, in four
//! variants:
//!
//! | kind   | branches | identity skip |
//! |--------|----------|---------------|
//! | CPE    | 1        | no            |
//! | R-CPE  | 1        | yes           |
//! | P-CPE  | n        | no            |
//! | RP-CPE | n        | yes           |
//!
//! Every branch is a plain depthwise convolution with bias, so the parallel
//! branches and the skip collapse exactly into one depthwise kernel:
//! summed kernels plus a unit center tap, summed biases.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::INIT_STD;
use crate::error::{Error, Result};
use crate::numerics::{Conv2dSpec, CounterRng, Element, ParamStore, Tape, Tensor, Var};

pub const KERNEL: usize = 3;
/// Branch count of the default RP-CPE.
pub const DEFAULT_BRANCHES: usize = 4;
/// Name prefix of re-parameterized tensors in a parameter store.
pub const MERGED_PREFIX: &str = "merged/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CpeKind {
    #[serde(rename = "cpe")]
    Cpe,
    #[serde(rename = "r-cpe")]
    RCpe,
    #[serde(rename = "p-cpe")]
    PCpe,
    #[serde(rename = "rp-cpe")]
    RpCpe,
}

impl CpeKind {
    pub fn has_skip(self) -> bool {
        matches!(self, CpeKind::RCpe | CpeKind::RpCpe)
    }

    /// Branch count for this kind given the requested parallel count.
    pub fn branch_count(self, n_branches: usize) -> usize {
        match self {
            CpeKind::Cpe | CpeKind::RCpe => 1,
            CpeKind::PCpe | CpeKind::RpCpe => n_branches,
        }
    }
}

impl fmt::Display for CpeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CpeKind::Cpe => "cpe",
            CpeKind::RCpe => "r-cpe",
            CpeKind::PCpe => "p-cpe",
            CpeKind::RpCpe => "rp-cpe",
        })
    }
}

impl FromStr for CpeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cpe" => Ok(CpeKind::Cpe),
            "r-cpe" | "rcpe" => Ok(CpeKind::RCpe),
            "p-cpe" | "pcpe" => Ok(CpeKind::PCpe),
            "rp-cpe" | "rpcpe" => Ok(CpeKind::RpCpe),
            other => Err(Error::Usage(format!(
                "unknown positional encoding `{other}` (expected cpe, r-cpe, p-cpe or rp-cpe)"
            ))),
        }
    }
}

fn depthwise(channels: usize) -> Conv2dSpec {
    Conv2dSpec::new(1, KERNEL / 2, channels)
}

/// Branch tensors of one positional-encoding layer, optionally with their
/// merged single-branch equivalent.
#[derive(Debug, Clone)]
pub struct RpCpeParams<T: Element = f32> {
    /// `(kernel [c,1,3,3], bias [c])` per branch.
    pub branches: Vec<(Tensor<T>, Tensor<T>)>,
    pub has_skip: bool,
    pub merged: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Element> RpCpeParams<T> {
    pub fn channels(&self) -> usize {
        self.branches.first().map_or(0, |(k, _)| k.shape()[0])
    }

    fn check_branches(&self) -> Result<usize> {
        let Some((k0, _)) = self.branches.first() else {
            return Err(Error::config("positional encoding needs at least one branch"));
        };
        let c = k0.shape()[0];
        for (i, (k, b)) in self.branches.iter().enumerate() {
            if k.shape() != [c, 1, KERNEL, KERNEL] || b.shape() != [c] {
                return Err(Error::config(format!(
                    "branch {i} has kernel {:?} / bias {:?}, expected [{c}, 1, 3, 3] / [{c}]",
                    k.shape(),
                    b.shape()
                )));
            }
        }
        Ok(c)
    }

    /// Collapse branches and skip into one depthwise kernel. Branches are
    /// kept; merging twice gives bit-identical results.
    pub fn merge(&self) -> Result<Self> {
        let c = self.check_branches()?;
        let taps = KERNEL * KERNEL;
        let mut kernel = vec![T::zero(); c * taps];
        let mut bias = vec![T::zero(); c];
        for (k, b) in &self.branches {
            kernel.iter_mut().zip(k.data()).for_each(|(acc, &v)| *acc = *acc + v);
            bias.iter_mut().zip(b.data()).for_each(|(acc, &v)| *acc = *acc + v);
        }
        if self.has_skip {
            let center = taps / 2;
            for ch in 0..c {
                kernel[ch * taps + center] = kernel[ch * taps + center] + T::one();
            }
        }
        Ok(Self {
            branches: self.branches.clone(),
            has_skip: self.has_skip,
            merged: Some((
                Tensor::from_vec(vec![c, 1, KERNEL, KERNEL], kernel)?,
                Tensor::from_vec(vec![c], bias)?,
            )),
        })
    }

    /// Sum of the branch convolutions plus the skip, on `x [b,c,h,w]`.
    pub fn forward_train(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let branches: Vec<_> = self
            .branches
            .iter()
            .map(|(k, b)| (tape.constant(k.clone()), tape.constant(b.clone())))
            .collect();
        Ok(train_path(&tape, &tape.constant(x.clone()), &branches, self.has_skip)?.into_value())
    }

    /// Single depthwise convolution with the merged kernel.
    pub fn forward_deploy(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (k, b) = self
            .merged
            .as_ref()
            .ok_or_else(|| Error::State("positional encoding has not been merged".into()))?;
        crate::numerics::conv2d(x, k, Some(b), depthwise(k.shape()[0]))
    }

    /// Scalars in the train-time form (all branches).
    pub fn train_param_count(&self) -> usize {
        self.branches.iter().map(|(k, b)| k.numel() + b.numel()).sum()
    }

    /// Scalars in the merged form; one branch worth regardless of branch count.
    pub fn merged_param_count(&self) -> Option<usize> {
        self.merged.as_ref().map(|(k, b)| k.numel() + b.numel())
    }
}

fn check_channels<T: Element>(x: &Var<T>, channels: usize) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != channels {
        return Err(Error::config(format!(
            "positional encoding over {channels} channels got input {s:?}"
        )));
    }
    Ok(())
}

fn train_path<T: Element>(tape: &Tape<T>, x: &Var<T>, branches: &[(Var<T>, Var<T>)], has_skip: bool) -> Result<Var<T>> {
    let channels = branches
        .first()
        .map(|(k, _)| k.shape()[0])
        .ok_or_else(|| Error::config("positional encoding needs at least one branch"))?;
    check_channels(x, channels)?;
    let mut acc: Option<Var<T>> = if has_skip { Some(x.clone()) } else { None };
    for (k, b) in branches {
        let y = tape.conv2d(x, k, Some(b), depthwise(channels))?;
        acc = Some(match acc {
            Some(a) => tape.add(&a, &y)?,
            None => y,
        });
    }
    Ok(acc.expect("at least one branch"))
}

/// Parameter layout of one positional-encoding layer inside a store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RpCpe {
    pub prefix: String,
    pub channels: usize,
    pub branches: usize,
    pub has_skip: bool,
}

/// Build the layout for a variant. CPE and R-CPE use one branch; P-CPE and
/// RP-CPE use `n_branches`.
pub fn make_cpe_variant(kind: CpeKind, prefix: impl Into<String>, channels: usize, n_branches: usize) -> Result<RpCpe> {
    if n_branches == 0 {
        return Err(Error::Usage("positional encoding needs n_branches >= 1".into()));
    }
    Ok(RpCpe {
        prefix: prefix.into(),
        channels,
        branches: kind.branch_count(n_branches),
        has_skip: kind.has_skip(),
    })
}

impl RpCpe {
    pub fn branch_names(&self, i: usize) -> (String, String) {
        (
            format!("{}.branch{i}.weight", self.prefix),
            format!("{}.branch{i}.bias", self.prefix),
        )
    }

    pub fn merged_names(&self) -> (String, String) {
        (
            format!("{MERGED_PREFIX}{}.weight", self.prefix),
            format!("{MERGED_PREFIX}{}.bias", self.prefix),
        )
    }

    pub fn param_shapes(&self, merged: bool) -> Vec<(String, Vec<usize>)> {
        let kernel = vec![self.channels, 1, KERNEL, KERNEL];
        let bias = vec![self.channels];
        if merged {
            let (k, b) = self.merged_names();
            return vec![(k, kernel), (b, bias)];
        }
        (0..self.branches)
            .flat_map(|i| {
                let (k, b) = self.branch_names(i);
                [(k, kernel.clone()), (b, bias.clone())]
            })
            .collect()
    }

    /// Truncated-normal branch kernels, zero biases.
    pub fn init<T: Element>(&self, store: &mut ParamStore<T>, rng: &CounterRng) -> Result<()> {
        for i in 0..self.branches {
            let (k, b) = self.branch_names(i);
            let kernel = rng.stream(&k).trunc_normal(&[self.channels, 1, KERNEL, KERNEL], INIT_STD)?;
            store.insert(k, kernel);
            store.insert(b, Tensor::zeros(vec![self.channels])?);
        }
        Ok(())
    }

    pub fn is_merged<T: Element>(&self, store: &ParamStore<T>) -> bool {
        store.contains(&self.merged_names().0)
    }

    pub fn load<T: Element>(&self, store: &ParamStore<T>) -> Result<RpCpeParams<T>> {
        let branches = (0..self.branches)
            .filter(|&i| store.contains(&self.branch_names(i).0))
            .map(|i| {
                let (k, b) = self.branch_names(i);
                Ok((store.get(&k)?.clone(), store.get(&b)?.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let merged = if self.is_merged(store) {
            let (k, b) = self.merged_names();
            Some((store.get(&k)?.clone(), store.get(&b)?.clone()))
        } else {
            None
        };
        Ok(RpCpeParams {
            branches,
            has_skip: self.has_skip,
            merged,
        })
    }

    /// Replace branch tensors in `store` by the merged kernel and bias.
    /// A store that is already merged is left untouched.
    pub fn merge_into<T: Element>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.is_merged(store) {
            return Ok(());
        }
        let merged = self.load(store)?.merge()?;
        for i in 0..self.branches {
            let (k, b) = self.branch_names(i);
            store.remove(&k);
            store.remove(&b);
        }
        let (kn, bn) = self.merged_names();
        let (k, b) = merged.merged.expect("merge sets merged");
        store.insert(kn, k);
        store.insert(bn, b);
        Ok(())
    }

    pub fn forward_train<T: Element>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let branches = (0..self.branches)
            .map(|i| {
                let (k, b) = self.branch_names(i);
                Ok((store.bind(tape, &k)?, store.bind(tape, &b)?))
            })
            .collect::<Result<Vec<_>>>()?;
        train_path(tape, x, &branches, self.has_skip)
    }

    pub fn forward_deploy<T: Element>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        if !self.is_merged(store) {
            return Err(Error::State(format!("`{}` has no merged kernel", self.prefix)));
        }
        check_channels(x, self.channels)?;
        let (k, b) = self.merged_names();
        tape.conv2d(x, &store.bind(tape, &k)?, Some(&store.bind(tape, &b)?), depthwise(self.channels))
    }

    /// Deploy path when the store holds a merged kernel, train path otherwise.
    pub fn forward<T: Element>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        if self.is_merged(store) {
            self.forward_deploy(tape, store, x)
        } else {
            self.forward_train(tape, store, x)
        }
    }
}

//! Flat parameter storage with a named block layout.
//!
//! The canonical order of blocks is the serialization order used by
//! checkpoints and by the gradient arrays.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::VmdnnConfig;
use crate::error::{Result, VmdnnError};

/// One named block of learnable parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    KernelVf,
    BiasVf,
    KernelVs,
    BiasVs,
    KernelPfc,
    WPfcPfc,
    WPfcMs,
    WMsPfc,
    WMsMs,
    WMsMf,
    WMfMs,
    WMfMf,
    WMoMf,
    BiasPfc,
    BiasMs,
    BiasMf,
    BiasMo,
}

impl Block {
    pub const ALL: [Block; 17] = [
        Block::KernelVf,
        Block::BiasVf,
        Block::KernelVs,
        Block::BiasVs,
        Block::KernelPfc,
        Block::WPfcPfc,
        Block::WPfcMs,
        Block::WMsPfc,
        Block::WMsMs,
        Block::WMsMf,
        Block::WMfMs,
        Block::WMfMf,
        Block::WMoMf,
        Block::BiasPfc,
        Block::BiasMs,
        Block::BiasMf,
        Block::BiasMo,
    ];

    /// Blocks owned by the visual pathway (V_I through the PFC drive).
    pub const VISUAL: [Block; 6] = [
        Block::KernelVf,
        Block::BiasVf,
        Block::KernelVs,
        Block::BiasVs,
        Block::KernelPfc,
        Block::BiasPfc,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Biases are exempt from weight decay.
    pub fn is_bias(self) -> bool {
        matches!(
            self,
            Block::BiasVf | Block::BiasVs | Block::BiasPfc | Block::BiasMs | Block::BiasMf | Block::BiasMo
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Block::KernelVf => "k_VF",
            Block::BiasVf => "b_VF",
            Block::KernelVs => "k_VS",
            Block::BiasVs => "b_VS",
            Block::KernelPfc => "k_PFC",
            Block::WPfcPfc => "w_PFC<-PFC",
            Block::WPfcMs => "w_PFC<-MS",
            Block::WMsPfc => "w_MS<-PFC",
            Block::WMsMs => "w_MS<-MS",
            Block::WMsMf => "w_MS<-MF",
            Block::WMfMs => "w_MF<-MS",
            Block::WMfMf => "w_MF<-MF",
            Block::WMoMf => "w_MO<-MF",
            Block::BiasPfc => "b_PFC",
            Block::BiasMs => "b_MS",
            Block::BiasMf => "b_MF",
            Block::BiasMo => "b_MO",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    ranges: [Range<usize>; 17],
    fan_in: [usize; 17],
}

impl ParamLayout {
    /// Block sizes implied by `cfg`. Only the two convolution stages need a
    /// valid geometry; empty motor layers simply produce empty blocks.
    pub fn new(cfg: &VmdnnConfig) -> Result<Self> {
        let vf = cfg.vf_geometry()?;
        let vs = cfg.vs_geometry()?;
        let pfc_in = vs.out_maps * cfg.pfc.kh * cfg.pfc.kw;
        let (npfc, nms, nmf, nmo) = (cfg.pfc.neurons, cfg.ms.neurons, cfg.mf.neurons, cfg.mo.groups.total());

        let sizes_and_fans = |b: Block| -> (usize, usize) {
            match b {
                Block::KernelVf => (vf.weight_len(), vf.in_maps * vf.kh * vf.kw),
                Block::BiasVf => (vf.out_maps, 0),
                Block::KernelVs => (vs.weight_len(), vs.in_maps * vs.kh * vs.kw),
                Block::BiasVs => (vs.out_maps, 0),
                Block::KernelPfc => (npfc * pfc_in, pfc_in + npfc + nms),
                Block::WPfcPfc => (npfc * npfc, pfc_in + npfc + nms),
                Block::WPfcMs => (npfc * nms, pfc_in + npfc + nms),
                Block::WMsPfc => (nms * npfc, npfc + nms + nmf),
                Block::WMsMs => (nms * nms, npfc + nms + nmf),
                Block::WMsMf => (nms * nmf, npfc + nms + nmf),
                Block::WMfMs => (nmf * nms, nms + nmf),
                Block::WMfMf => (nmf * nmf, nms + nmf),
                Block::WMoMf => (nmo * nmf, nmf),
                Block::BiasPfc => (npfc, 0),
                Block::BiasMs => (nms, 0),
                Block::BiasMf => (nmf, 0),
                Block::BiasMo => (nmo, 0),
            }
        };

        let mut ranges: [Range<usize>; 17] = Default::default();
        let mut fan_in = [0usize; 17];
        let mut offset = 0;
        for b in Block::ALL {
            let (len, fan) = sizes_and_fans(b);
            ranges[b.index()] = offset..offset + len;
            fan_in[b.index()] = fan;
            offset += len;
        }
        Ok(Self { ranges, fan_in })
    }

    pub fn total(&self) -> usize {
        self.ranges[16].end
    }

    pub fn range(&self, b: Block) -> Range<usize> {
        self.ranges[b.index()].clone()
    }

    pub fn fan_in(&self, b: Block) -> usize {
        self.fan_in[b.index()]
    }

    /// Block containing flat index `i`.
    pub fn block_of(&self, i: usize) -> Option<Block> {
        Block::ALL.into_iter().find(|b| self.ranges[b.index()].contains(&i))
    }
}

/// All learnable parameters in canonical flat order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    layout: ParamLayout,
    values: Vec<f64>,
}

/// Gradients share the parameter layout exactly.
pub type GradientSet = ParameterSet;

impl ParameterSet {
    pub fn zeros(cfg: &VmdnnConfig) -> Result<Self> {
        let layout = ParamLayout::new(cfg)?;
        Ok(Self::zeros_like_layout(layout))
    }

    fn zeros_like_layout(layout: ParamLayout) -> Self {
        let values = vec![0.0; layout.total()];
        Self { layout, values }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros_like_layout(self.layout.clone())
    }

    pub fn from_flat(cfg: &VmdnnConfig, values: Vec<f64>) -> Result<Self> {
        let layout = ParamLayout::new(cfg)?;
        if values.len() != layout.total() {
            return Err(VmdnnError::config(format!(
                "configuration needs {} parameters, got {}",
                layout.total(),
                values.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn block(&self, b: Block) -> &[f64] {
        &self.values[self.layout.range(b)]
    }

    pub fn block_mut(&mut self, b: Block) -> &mut [f64] {
        let r = self.layout.range(b);
        &mut self.values[r]
    }

    pub fn fill(&mut self, v: f64) {
        self.values.iter_mut().for_each(|x| *x = v);
    }

    /// Copies the listed blocks from `other`, which must share the layout.
    pub fn splice_from(&mut self, other: &ParameterSet, blocks: &[Block]) -> Result<()> {
        if self.layout != other.layout {
            return Err(VmdnnError::config("cannot splice parameters with different layouts"));
        }
        for &b in blocks {
            let r = self.layout.range(b);
            self.values[r.clone()].copy_from_slice(&other.values[r]);
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Uniform initialisation in `[-scale/sqrt(fan_in), scale/sqrt(fan_in)]` for
/// weights and kernels; biases start at zero. Blocks are drawn in canonical
/// order from one seeded stream.
pub fn init_parameters(cfg: &VmdnnConfig, seed: u64, scale: f64) -> Result<ParameterSet> {
    let mut params = ParameterSet::zeros(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for b in Block::ALL {
        if b.is_bias() {
            continue;
        }
        let fan = params.layout.fan_in(b).max(1) as f64;
        let bound = scale / fan.sqrt();
        for w in params.block_mut(b) {
            let r: f64 = rng.gen_range(-1.0..1.0);
            *w = r * bound;
        }
    }
    Ok(params)
}

pub fn count_parameters(cfg: &VmdnnConfig) -> Result<usize> {
    Ok(ParamLayout::new(cfg)?.total())
}

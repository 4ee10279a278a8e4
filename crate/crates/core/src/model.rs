// SPDX-License-Identifier: Apache-2.0

//! Four-stage spiking transformer: stem, two convolutional stages, two
//! attention stages, pooled linear head.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::blocks::{BlockBuilder, ChannelConv, ConvUnit, Downsample, Linear, SepConv, SpikingMlp, Sdsa, NORM_MOMENTUM};
use crate::energy::{CostedLayer, Domain};
use crate::error::{Error, Result};
use crate::kernels::{conv_out_len, ConvGeom};
use crate::neuron::{FiringStats, LifParams};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::session::{NormUpdate, RunMode, Session};
use crate::surrogate::SurrogateSpec;
use crate::tensor::Tensor;

fn default_expansion() -> usize {
    2
}

fn default_heads() -> usize {
    1
}

fn default_true() -> bool {
    true
}

/// Architecture and neuron hyper-parameters.
///
/// The EEG window `[electrodes, samples]` is a one-channel image. The stem
/// embeds it into `stage_widths[0]` channels; stages 2 to 4 each start with
/// a stride-2 downsample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub t_sim: usize,
    pub in_channels: usize,
    pub window_samples: usize,
    /// Stem kernel `[electrodes, samples]`.
    pub stem_kernel: [usize; 2],
    pub stem_stride: [usize; 2],
    pub stage_widths: [usize; 4],
    /// Convolutional blocks (SepConv + ChannelConv pairs) in stages 1 and 2.
    pub conv_blocks: [usize; 2],
    /// Transformer blocks (attention + MLP pairs) in stages 3 and 4.
    pub transformer_blocks: [usize; 2],
    #[serde(default = "default_expansion")]
    pub sepconv_expansion: usize,
    pub mlp_ratio: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    pub n_classes: usize,
    #[serde(default)]
    pub surrogate: SurrogateSpec,
    #[serde(default)]
    pub lif: LifParams,
    #[serde(default = "default_true")]
    pub norm_enabled: bool,
    #[serde(default)]
    pub repconv_folded: bool,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// Small configuration sized for a single CPU core.
    pub fn desk(in_channels: usize, window_samples: usize, n_classes: usize) -> Self {
        Self {
            t_sim: 4,
            in_channels,
            window_samples,
            stem_kernel: [4, 64],
            stem_stride: [4, 32],
            stage_widths: [16, 32, 64, 64],
            conv_blocks: [1, 1],
            transformer_blocks: [1, 1],
            sepconv_expansion: 2,
            mlp_ratio: 4,
            heads: 1,
            n_classes,
            surrogate: SurrogateSpec::default(),
            lif: LifParams::default(),
            norm_enabled: true,
            repconv_folded: false,
            seed: 0,
        }
    }

    /// Full-resolution configuration of roughly 3.9M parameters.
    pub fn paper_scale(in_channels: usize, window_samples: usize, n_classes: usize) -> Self {
        Self {
            stem_kernel: [3, 16],
            stem_stride: [1, 8],
            stage_widths: [64, 144, 144, 160],
            conv_blocks: [2, 2],
            transformer_blocks: [1, 1],
            ..Self::desk(in_channels, window_samples, n_classes)
        }
    }

    /// Tiny configuration for tests.
    pub fn minimal(n_classes: usize) -> Self {
        Self {
            t_sim: 2,
            in_channels: 8,
            window_samples: 32,
            stem_kernel: [3, 4],
            stem_stride: [1, 2],
            stage_widths: [4, 8, 8, 8],
            ..Self::desk(8, 32, n_classes)
        }
    }

    /// The desk configuration with the second convolutional stage emptied.
    pub fn ablation(in_channels: usize, window_samples: usize, n_classes: usize) -> Self {
        Self {
            conv_blocks: [1, 0],
            ..Self::desk(in_channels, window_samples, n_classes)
        }
    }

    fn stem_geom(&self) -> ConvGeom {
        let [kh, kw] = self.stem_kernel;
        let [sh, sw] = self.stem_stride;
        ConvGeom::new((sh, sw), ((kh - sh) / 2, (kw - sw) / 2))
    }

    /// Spatial size entering each stage.
    pub fn stage_dims(&self) -> Result<[(usize, usize); 4]> {
        self.validate()?;
        Ok(self.dims_unchecked())
    }

    fn dims_unchecked(&self) -> [(usize, usize); 4] {
        let g = self.stem_geom();
        let h = conv_out_len(self.in_channels, self.stem_kernel[0], g.stride.0, g.pad.0).unwrap_or(0);
        let w = conv_out_len(self.window_samples, self.stem_kernel[1], g.stride.1, g.pad.1).unwrap_or(0);
        let half = |d: usize| if d == 0 { 0 } else { (d - 1) / 2 + 1 };
        let mut dims = [(h, w); 4];
        for i in 1..4 {
            dims[i] = (half(dims[i - 1].0), half(dims[i - 1].1));
        }
        dims
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.t_sim == 0 {
            return fail("t_sim must be at least 1".into());
        }
        if self.n_classes < 2 {
            return fail(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.mlp_ratio == 0 || self.sepconv_expansion == 0 {
            return fail("mlp_ratio and sepconv_expansion must be at least 1".into());
        }
        if self.stage_widths.contains(&0) {
            return fail(format!("stage widths must be positive, got {:?}", self.stage_widths));
        }
        if self.heads == 0 || self.stage_widths[2..].iter().any(|w| w % self.heads != 0) {
            return fail(format!("stage 3 and 4 widths must divide into {} heads", self.heads));
        }
        for axis in 0..2 {
            let (k, s) = (self.stem_kernel[axis], self.stem_stride[axis]);
            if s == 0 || k < s || (k - s) % 2 != 0 {
                return fail(format!(
                    "stem kernel {k} and stride {s} must satisfy kernel >= stride with an even difference"
                ));
            }
        }
        let total = self.stem_stride[1] * 8;
        if self.window_samples == 0 || self.window_samples % total != 0 {
            return fail(format!(
                "window_samples {} must be divisible by the total time stride {total}",
                self.window_samples
            ));
        }
        let dims = self.dims_unchecked();
        for (i, &(h, w)) in dims.iter().enumerate() {
            if h == 0 || w == 0 || (i < 3 && (h < 2 || w < 2)) {
                return fail(format!(
                    "input {}x{} leaves stage {} with a {h}x{w} map; each of the three downsamples needs at least 2x2",
                    self.in_channels,
                    self.window_samples,
                    i + 1
                ));
            }
        }
        self.lif.validate()?;
        self.surrogate.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum Block {
    Sep(SepConv),
    Channel(ChannelConv),
    Attention(Sdsa),
    Mlp(SpikingMlp),
}

impl Block {
    fn forward<S: Scalar>(&self, sess: &mut Session<'_, S>, x: Var) -> Result<Var> {
        match self {
            Block::Sep(b) => b.forward(sess, x),
            Block::Channel(b) => b.forward(sess, x),
            Block::Attention(b) => b.forward(sess, x),
            Block::Mlp(b) => b.forward(sess, x),
        }
    }

    fn costs(&self, out: &mut Vec<CostedLayer>) {
        match self {
            Block::Sep(b) => b.costs(out),
            Block::Channel(b) => b.costs(out),
            Block::Attention(b) => b.costs(out),
            Block::Mlp(b) => b.costs(out),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub name: String,
    pub down: Option<Downsample>,
    pub blocks: Vec<Block>,
}

pub const HEAD_SITE: &str = "head.sn";

/// A built network together with its parameters.
#[derive(Debug, Clone)]
pub struct Model<S: Scalar = f32> {
    pub cfg: ModelConfig,
    pub store: ParamStore<S>,
    pub stem: ConvUnit,
    pub stages: Vec<Stage>,
    pub head: Linear,
    training: bool,
}

impl<S: Scalar> Model<S> {
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        let dims = cfg.stage_dims()?;
        let mut store = ParamStore::new();
        let mut b = BlockBuilder::new(&mut store, cfg.seed, cfg.norm_enabled);
        let w = cfg.stage_widths;
        let stem = b.conv(
            "stem",
            1,
            w[0],
            (cfg.stem_kernel[0], cfg.stem_kernel[1]),
            cfg.stem_geom(),
            (cfg.in_channels, cfg.window_samples),
            false,
        );
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let name = format!("stage{}", s + 1);
            let hw = dims[s];
            let down = if s == 0 {
                None
            } else {
                Some(Downsample::build(&mut b, &format!("{name}.down"), w[s - 1], w[s], dims[s - 1])?)
            };
            let mut blocks = Vec::new();
            if s < 2 {
                for i in 0..cfg.conv_blocks[s] {
                    let p = format!("{name}.block{i}");
                    blocks.push(Block::Sep(SepConv::build(&mut b, &format!("{p}.sep"), w[s], cfg.sepconv_expansion, hw)));
                    blocks.push(Block::Channel(ChannelConv::build(&mut b, &format!("{p}.chan"), w[s], hw)));
                }
            } else {
                for i in 0..cfg.transformer_blocks[s - 2] {
                    let p = format!("{name}.block{i}");
                    blocks.push(Block::Attention(Sdsa::build(
                        &mut b,
                        &format!("{p}.sdsa"),
                        w[s],
                        cfg.heads,
                        hw,
                        cfg.repconv_folded,
                    )));
                    blocks.push(Block::Mlp(SpikingMlp::build(&mut b, &format!("{p}.mlp"), w[s], cfg.mlp_ratio, hw)));
                }
            }
            stages.push(Stage { name, down, blocks });
        }
        let head = b.linear("head", w[3], cfg.n_classes);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            stem,
            stages,
            head,
            training: false,
        })
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    /// Same architecture and weights in another element type.
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            stem: self.stem.clone(),
            stages: self.stages.clone(),
            head: self.head.clone(),
            training: self.training,
        }
    }

    /// Number of learnable scalars.
    pub fn count_params(&self) -> usize {
        self.store.count_learnable()
    }

    pub fn session(&self, mode: RunMode) -> Session<'_, S> {
        Session::new(&self.store, mode, self.cfg.t_sim, self.cfg.lif, self.cfg.surrogate)
    }

    /// Logits `[B, n_classes]` for windows `[B, electrodes, samples]`.
    pub fn forward(&self, sess: &mut Session<'_, S>, windows: Var) -> Result<Var> {
        let shape = sess.tape.shape(windows).to_vec();
        let expect = [self.cfg.in_channels, self.cfg.window_samples];
        if shape.len() != 3 || shape[1..] != expect {
            return Err(Error::Shape(format!(
                "model expects windows [B, {}, {}], got {shape:?}",
                expect[0], expect[1]
            )));
        }
        let x = sess.tape.reshape(windows, &[shape[0], 1, shape[1], shape[2]])?;
        let x = self.stem.forward(sess, x)?;
        let mut x = sess.tape.repeat_leading(x, self.cfg.t_sim)?;
        for stage in &self.stages {
            if let Some(down) = &stage.down {
                x = down.forward(sess, x)?;
            }
            for block in &stage.blocks {
                x = block.forward(sess, x)?;
            }
        }
        let s = sess.spike(HEAD_SITE, x)?;
        let pooled = sess.tape.mean_spatial(s)?;
        let pooled = sess.tape.mean_leading(pooled, self.cfg.t_sim)?;
        self.head.forward(sess, pooled)
    }

    /// Inference-mode logits together with per-site firing statistics.
    pub fn predict(&self, windows: &Tensor<S>) -> Result<(Tensor<S>, BTreeMap<String, FiringStats>)> {
        let mut sess = self.session(RunMode::EVAL);
        let x = sess.input(windows.clone());
        let y = self.forward(&mut sess, x)?;
        Ok((sess.tape.value(y).clone(), sess.firing().clone()))
    }

    pub fn logits(&self, windows: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.predict(windows)?.0)
    }

    /// Folds every attention projection into a single biased 3x3 conv.
    /// Returns how many projections were folded.
    pub fn fold(&mut self) -> Result<usize> {
        if self.training {
            return Err(Error::Contract(
                "re-parameterization needs frozen normalization statistics; switch the model to evaluation mode".into(),
            ));
        }
        let mut n = 0;
        for stage in &mut self.stages {
            for block in &mut stage.blocks {
                if let Block::Attention(sdsa) = block {
                    for rc in sdsa.repconvs_mut() {
                        n += rc.fold_in_place(&mut self.store) as usize;
                    }
                }
            }
        }
        self.cfg.repconv_folded = true;
        Ok(n)
    }

    /// Exponential update of running statistics from training-mode moments.
    pub fn apply_norm_updates(&mut self, updates: &[NormUpdate]) {
        let m = NORM_MOMENTUM;
        for u in updates {
            for (id, batch) in [(u.mean, &u.moments.mean), (u.var, &u.moments.var)] {
                for (r, &b) in self.store.value_mut(id).data_mut().iter_mut().zip(batch) {
                    *r = S::of((1.0 - m) * r.as_f64() + m * b);
                }
            }
        }
    }

    /// Zeroes the classifier weights and bias.
    pub fn zero_classifier(&mut self) {
        for id in [self.head.weight, self.head.bias] {
            self.store.value_mut(id).data_mut().fill(S::zero());
        }
    }

    /// Every layer charged by the energy model, in forward order.
    pub fn cost_layers(&self) -> Vec<CostedLayer> {
        let mut out = vec![CostedLayer {
            name: self.stem.name.clone(),
            geometry: self.stem.geometry(),
            domain: Domain::Mac,
            rate_site: None,
        }];
        for stage in &self.stages {
            if let Some(d) = &stage.down {
                d.costs(&mut out);
            }
            for block in &stage.blocks {
                block.costs(&mut out);
            }
        }
        out.push(CostedLayer {
            name: self.head.name.clone(),
            geometry: crate::energy::LayerGeometry::Linear {
                c_in: self.head.c_in,
                c_out: self.head.c_out,
                tokens: 1,
            },
            domain: Domain::Ac,
            rate_site: Some(HEAD_SITE.to_string()),
        });
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_windows(cfg: &ModelConfig, b: usize, seed: u64) -> Tensor<f32> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = b * cfg.in_channels * cfg.window_samples;
        let data = (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        Tensor::new(&[b, cfg.in_channels, cfg.window_samples], data).unwrap()
    }

    #[test]
    fn minimal_emits_two_logits() {
        let cfg = ModelConfig::minimal(2);
        let m = Model::<f32>::build(&cfg).unwrap();
        let y = m.logits(&random_windows(&cfg, 3, 1)).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
    }

    #[test]
    fn stage_dims_follow_the_stride_plan() {
        let cfg = ModelConfig::desk(32, 1280, 26);
        assert_eq!(cfg.stage_dims().unwrap(), [(8, 40), (4, 20), (2, 10), (1, 5)]);
        let paper = ModelConfig::paper_scale(32, 1280, 26);
        assert_eq!(paper.stage_dims().unwrap(), [(32, 160), (16, 80), (8, 40), (4, 20)]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ModelConfig::minimal(2);
        c.n_classes = 1;
        assert!(matches!(Model::<f32>::build(&c), Err(Error::Config(_))));
        let mut c = ModelConfig::minimal(2);
        c.window_samples = 30;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::minimal(2);
        c.stem_kernel = [2, 4];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::minimal(2);
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn wrong_window_shape_is_shape_error() {
        let cfg = ModelConfig::minimal(2);
        let m = Model::<f32>::build(&cfg).unwrap();
        let x = Tensor::zeros(&[1, cfg.in_channels, cfg.window_samples * 2]);
        assert!(matches!(m.logits(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn duplicated_windows_give_identical_rows() {
        let cfg = ModelConfig::minimal(3);
        let m = Model::<f32>::build(&cfg).unwrap();
        let one = random_windows(&cfg, 1, 7);
        let two = one.select_rows(&[0, 0]).unwrap();
        let y = m.logits(&two).unwrap();
        assert_eq!(y.row(0), y.row(1));
    }

    #[test]
    fn batch_permutation_permutes_logits() {
        let cfg = ModelConfig::minimal(3);
        let m = Model::<f32>::build(&cfg).unwrap();
        let x = random_windows(&cfg, 3, 9);
        let y = m.logits(&x).unwrap();
        let yp = m.logits(&x.select_rows(&[2, 0, 1]).unwrap()).unwrap();
        assert_eq!(yp.row(0), y.row(2));
        assert_eq!(yp.row(1), y.row(0));
        assert_eq!(yp.row(2), y.row(1));
    }

    #[test]
    fn zero_classifier_gives_zero_logits() {
        let cfg = ModelConfig::minimal(4);
        let mut m = Model::<f32>::build(&cfg).unwrap();
        m.zero_classifier();
        let y = m.logits(&random_windows(&cfg, 2, 3)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fold_requires_eval_mode() {
        let cfg = ModelConfig::minimal(2);
        let mut m = Model::<f32>::build(&cfg).unwrap();
        m.set_training(true);
        assert!(matches!(m.fold(), Err(Error::Contract(_))));
        m.set_training(false);
        assert_eq!(m.fold().unwrap(), 8);
        assert_eq!(m.fold().unwrap(), 0);
        assert!(m.cfg.repconv_folded);
    }

    #[test]
    fn fold_preserves_inference_logits() {
        let cfg = ModelConfig::minimal(3);
        let mut m = Model::<f32>::build(&cfg).unwrap();
        let x = random_windows(&cfg, 2, 5);
        let before = m.logits(&x).unwrap();
        m.fold().unwrap();
        let after = m.logits(&x).unwrap();
        assert!(before.max_abs_diff(&after).unwrap() < 1e-4);
    }

    #[test]
    fn every_site_is_binary() {
        let cfg = ModelConfig::minimal(2);
        let m = Model::<f32>::build(&cfg).unwrap();
        let mut sess = m.session(RunMode::EVAL);
        let x = sess.input(random_windows(&cfg, 2, 4));
        m.forward(&mut sess, x).unwrap();
        assert!(!sess.sites().is_empty());
        for (name, v) in sess.sites() {
            assert!(sess.tape.value(*v).is_binary(), "site {name}");
        }
    }

    #[test]
    fn cost_layers_reference_recorded_sites() {
        let cfg = ModelConfig::minimal(2);
        let m = Model::<f32>::build(&cfg).unwrap();
        let (_, rates) = m.predict(&random_windows(&cfg, 1, 4)).unwrap();
        let layers = m.cost_layers();
        assert_eq!(layers[0].domain, Domain::Mac);
        for l in &layers[1..] {
            assert_eq!(l.domain, Domain::Ac);
            assert!(rates.contains_key(l.rate_site.as_ref().unwrap()), "{}", l.name);
        }
    }
}

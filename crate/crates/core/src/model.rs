//! Hybrid 1D/2D U-Net for masked ECG reconstruction: a two-branch encoder
//! (one 2D branch over the 12x512 image, twelve per-lead 1D branches),
//! per-level channel concatenation feeding both the next level and the skip
//! connections, a (13,3) transposed-conv transition, and a skip-connected
//! transposed-conv decoder ending in a Tanh head.

use crate::autodiff::{Graph, Mode, NodeId, Scalar, Tensor};
use crate::ecg::{EcgRecord, LEAD_COUNT};
use crate::error::{Error, Result};
use crate::masking::MaskedEcg;
use crate::metrics::{mix, Reconstruct};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Channel widths of the four 2D encoder blocks.
    pub enc2d_channels: [usize; 4],
    /// Per-lead channel widths of the four 1D encoder blocks.
    pub enc1d_channels: [usize; 4],
    /// Output channels of the transition block.
    pub transition_channels: usize,
    pub leaky_slope: f64,
    pub dropout_p: f64,
    pub transition_kernel: (usize, usize),
    /// Samples per lead accepted by the network (width halves four times).
    pub input_width: usize,
    /// Share one set of 1D weights across leads instead of "12 x 4" blocks.
    pub share_1d_weights: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc2d_channels: [32, 64, 128, 256],
            enc1d_channels: [8, 16, 32, 64],
            transition_channels: 256,
            leaky_slope: 0.2,
            dropout_p: 0.2,
            transition_kernel: (13, 3),
            input_width: 512,
            share_1d_weights: false,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    /// Small configuration for desk-scale training runs on CPU.
    pub fn desk() -> Self {
        ModelConfig {
            enc2d_channels: [6, 12, 16, 24],
            enc1d_channels: [2, 2, 3, 4],
            transition_channels: 12,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc2d_channels.iter().chain(&self.enc1d_channels).any(|&c| c == 0)
            || self.transition_channels == 0
        {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.input_width < 16 || self.input_width % 16 != 0 {
            return Err(Error::Config(format!(
                "input width {} must be a positive multiple of 16 (four halvings)",
                self.input_width
            )));
        }
        if self.transition_kernel.0 % 2 == 0 || self.transition_kernel.1 % 2 == 0 {
            return Err(Error::Config(
                "transition kernel dims must be odd to preserve shape".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config("dropout probability must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Channels of the concatenated (2D + stacked 1D) tensor per level.
    fn cat_channels(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for i in 0..4 {
            c[i] = self.enc2d_channels[i] + self.enc1d_channels[i];
        }
        c
    }

    /// Decoder output channels; the final block emits a single channel.
    fn dec_channels(&self) -> [usize; 4] {
        [self.enc2d_channels[2], self.enc2d_channels[1], self.enc2d_channels[0], 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimized by the trainer.
    Trainable,
    /// Running statistics updated outside the gradient path.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor<f32>,
    pub kind: ParamKind,
}

/// Network parameters plus the configuration that shaped them.
pub struct Model {
    pub config: ModelConfig,
    params: Vec<Param>,
}

/// Handle to a batchnorm node whose batch statistics update the named
/// running-stat buffers after a training step.
pub struct BnHook {
    pub node: NodeId,
    pub rm_param: usize,
    pub rv_param: usize,
}

pub struct ForwardPass {
    pub output: NodeId,
    pub bn_hooks: Vec<BnHook>,
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Param>,
}

impl Builder {
    fn conv_weight(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = (0..numel)
            .map(|_| self.rng.gen_range(-bound..bound) as f32)
            .collect();
        self.params.push(Param {
            name: name.to_string(),
            tensor: Tensor { shape, data },
            kind: ParamKind::Trainable,
        });
    }

    fn batchnorm(&mut self, name: &str, channels: usize) {
        for (suffix, fill, kind) in [
            ("gamma", 1.0f32, ParamKind::Trainable),
            ("beta", 0.0, ParamKind::Trainable),
            ("running_mean", 0.0, ParamKind::Buffer),
            ("running_var", 1.0, ParamKind::Buffer),
        ] {
            self.params.push(Param {
                name: format!("{name}.{suffix}"),
                tensor: Tensor { shape: vec![channels], data: vec![fill; channels] },
                kind,
            });
        }
    }
}

impl Model {
    /// Instantiates all layers with seeded uniform initialization; two
    /// builds from the same seed are byte-identical.
    pub fn build(config: ModelConfig, init_seed: u64) -> Result<Model> {
        config.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(init_seed),
            params: Vec::new(),
        };
        let cat = config.cat_channels();
        // 2D encoder: kernel (3,5), stride (1,2), same-height padding.
        let mut in2d = 1;
        for (i, &out) in config.enc2d_channels.iter().enumerate() {
            b.conv_weight(&format!("enc2d.{i}.conv.w"), vec![out, in2d, 3, 5], in2d * 15);
            b.batchnorm(&format!("enc2d.{i}.bn"), out);
            in2d = cat[i];
        }
        // 1D encoder: kernel 5, stride 2, per lead unless shared.
        let lead_sets = if config.share_1d_weights { 1 } else { LEAD_COUNT };
        for lead in 0..lead_sets {
            let mut in1d = 1;
            for (i, &out) in config.enc1d_channels.iter().enumerate() {
                let prefix = if config.share_1d_weights {
                    format!("enc1d.{i}")
                } else {
                    format!("enc1d.{i}.lead{lead}")
                };
                b.conv_weight(&format!("{prefix}.conv.w"), vec![out, in1d, 5], in1d * 5);
                b.batchnorm(&format!("{prefix}.bn"), out);
                in1d = out;
            }
        }
        // Transition: (13,3) transposed conv, stride 1, shape-preserving.
        let (kh, kw) = config.transition_kernel;
        b.conv_weight(
            "transition.conv.w",
            vec![cat[3], config.transition_channels, kh, kw],
            cat[3] * kh * kw,
        );
        b.batchnorm("transition.bn", config.transition_channels);
        // Decoder: kernel (3,4), stride (1,2), padding (1,1) doubles width.
        let dec = config.dec_channels();
        let mut in_dec = config.transition_channels + cat[3];
        for (i, &out) in dec.iter().enumerate() {
            b.conv_weight(&format!("dec.{i}.conv.w"), vec![in_dec, out, 3, 4], in_dec * 12);
            if i < 3 {
                b.batchnorm(&format!("dec.{i}.bn"), out);
                in_dec = out + cat[2 - i];
            }
        }
        Ok(Model { config, params: b.params })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Vec<Param> {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Indices of trainable parameters, in declaration order.
    pub fn trainable_indices(&self) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(i, _)| i)
            .collect()
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Registers parameters on a graph. Trainable parameters become gradient
    /// leaves when `with_grad` is set; buffers are never registered (their
    /// values feed batchnorm eval directly).
    pub fn register_params<T: Scalar>(&self, g: &mut Graph<T>, with_grad: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| {
                let grad = with_grad && p.kind == ParamKind::Trainable;
                g.input(p.tensor.map_scalar::<T>(), grad)
            })
            .collect()
    }

    /// Registers externally supplied parameter values (aligned with
    /// `params()` order) instead of the stored ones. Gradient-verification
    /// paths use this to evaluate the network at perturbed parameters.
    pub fn register_params_from<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        values: &[Tensor<T>],
        with_grad: bool,
    ) -> Result<Vec<NodeId>> {
        if values.len() != self.params.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        Ok(self
            .params
            .iter()
            .zip(values)
            .map(|(p, v)| g.input(v.clone(), with_grad && p.kind == ParamKind::Trainable))
            .collect())
    }

    fn buffer_values<T: Scalar>(&self, idx: usize) -> Vec<T> {
        self.params[idx].tensor.data.iter().map(|&v| T::from_f32(v)).collect()
    }

    /// Builds the full forward computation on a tape. `param_ids` must come
    /// from `register_params`. Dropout streams derive from `dropout_seed`
    /// and the layer ordinal, so a fixed seed fixes the whole pass.
    pub fn forward_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        param_ids: &[NodeId],
        input: NodeId,
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        let eps = T::from_f64(cfg.bn_eps);
        let slope = T::from_f64(cfg.leaky_slope);
        let width = cfg.input_width;
        if g.value(input).shape != vec![1, LEAD_COUNT, width] {
            return Err(Error::shape(format!(
                "model expects input [1, 12, {width}], got {:?}",
                g.value(input).shape
            )));
        }
        let mut bn_hooks = Vec::new();
        let mut dropout_ordinal = 0u64;
        let idx = |name: &str| -> Result<usize> {
            self.param_index(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
        };

        let bn = |g: &mut Graph<T>,
                      x: NodeId,
                      prefix: &str,
                      hooks: &mut Vec<BnHook>|
         -> Result<NodeId> {
            let gamma = idx(&format!("{prefix}.gamma"))?;
            let beta = idx(&format!("{prefix}.beta"))?;
            let rm = idx(&format!("{prefix}.running_mean"))?;
            let rv = idx(&format!("{prefix}.running_var"))?;
            let node = g.batchnorm(
                x,
                param_ids[gamma],
                param_ids[beta],
                eps,
                mode,
                &self.buffer_values::<T>(rm),
                &self.buffer_values::<T>(rv),
            )?;
            if mode == Mode::Train {
                hooks.push(BnHook { node, rm_param: rm, rv_param: rv });
            }
            Ok(node)
        };
        let drop_layer = |g: &mut Graph<T>, x: NodeId, ordinal: &mut u64| -> NodeId {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(dropout_seed, 0x0d10 + *ordinal));
            *ordinal += 1;
            g.dropout(x, cfg.dropout_p, mode, &mut rng)
        };

        // Per-lead rows of the input image: [1, width] each.
        let mut lead_feats: Vec<NodeId> = (0..LEAD_COUNT)
            .map(|l| g.index_h(input, l))
            .collect::<Result<_>>()?;
        let mut cur2d = input;
        let mut skips = Vec::with_capacity(4);
        let mut level_width = width;

        for level in 0..4 {
            level_width /= 2;
            // 2D block.
            let w2 = idx(&format!("enc2d.{level}.conv.w"))?;
            let c2 = g.conv2d(cur2d, param_ids[w2], (1, 2), (1, 2))?;
            let b2 = bn(g, c2, &format!("enc2d.{level}.bn"), &mut bn_hooks)?;
            let a2 = g.leaky_relu(b2, slope);
            let d2 = drop_layer(g, a2, &mut dropout_ordinal);
            // 1D blocks, one per lead.
            let mut stacked = Vec::with_capacity(LEAD_COUNT);
            for (lead, feat) in lead_feats.iter_mut().enumerate() {
                let prefix = if cfg.share_1d_weights {
                    format!("enc1d.{level}")
                } else {
                    format!("enc1d.{level}.lead{lead}")
                };
                let w1 = idx(&format!("{prefix}.conv.w"))?;
                let c1 = g.conv1d(*feat, param_ids[w1], 2, 2)?;
                let b1 = bn(g, c1, &format!("{prefix}.bn"), &mut bn_hooks)?;
                let a1 = g.leaky_relu(b1, slope);
                let d1 = drop_layer(g, a1, &mut dropout_ordinal);
                *feat = d1;
                let channels = g.value(d1).shape[0];
                stacked.push(g.reshape(d1, vec![channels, 1, level_width])?);
            }
            let stack = g.concat(&stacked, 1)?;
            let cat = g.concat(&[d2, stack], 0)?;
            skips.push(cat);
            cur2d = cat;
        }

        // Transition block.
        let (kh, kw) = cfg.transition_kernel;
        let wt = idx("transition.conv.w")?;
        let t =
            g.conv_transpose2d(cur2d, param_ids[wt], (1, 1), ((kh - 1) / 2, (kw - 1) / 2))?;
        let tb = bn(g, t, "transition.bn", &mut bn_hooks)?;
        let mut cur = g.leaky_relu(tb, slope);

        // Decoder with symmetric skips.
        for level in 0..4 {
            let inp = g.concat(&[cur, skips[3 - level]], 0)?;
            let wd = idx(&format!("dec.{level}.conv.w"))?;
            let dc = g.conv_transpose2d(inp, param_ids[wd], (1, 2), (1, 1))?;
            cur = if level < 3 {
                let db = bn(g, dc, &format!("dec.{level}.bn"), &mut bn_hooks)?;
                g.leaky_relu(db, slope)
            } else {
                g.tanh_act(dc)
            };
        }
        Ok(ForwardPass { output: cur, bn_hooks })
    }

    /// Inference on one masked record. Eval mode is a pure function of the
    /// parameters and input.
    pub fn forward(&self, masked: &MaskedEcg, mode: Mode) -> Result<EcgRecord> {
        if masked.n() != self.config.input_width {
            return Err(Error::shape(format!(
                "masked record has {} samples per lead, model wants {}",
                masked.n(),
                self.config.input_width
            )));
        }
        let mut g: Graph<f32> = Graph::new();
        let param_ids = self.register_params(&mut g, false);
        let input = g.input(
            Tensor::new(vec![1, LEAD_COUNT, masked.n()], masked.samples.clone())?,
            false,
        );
        let pass = self.forward_graph(&mut g, &param_ids, input, mode, 0)?;
        let out = g.value(pass.output);
        let mut rec = EcgRecord::new(
            masked.source_id.clone(),
            masked.sampling_rate,
            out.data.clone(),
            masked.n(),
        )?;
        rec.set_normalized()?;
        Ok(rec)
    }
}

impl Reconstruct for Model {
    fn method_name(&self) -> &str {
        "model"
    }
    fn reconstruct(&self, masked: &MaskedEcg) -> Result<EcgRecord> {
        self.forward(masked, Mode::Eval)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{apply_mask, primer_mask, MaskConfig, PrimerMask};
    use crate::preprocess::{minmax_normalize, NormalizeScope};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            enc2d_channels: [2, 3, 4, 5],
            enc1d_channels: [1, 1, 2, 2],
            transition_channels: 4,
            dropout_p: 0.2,
            ..Default::default()
        }
    }

    fn masked_input(width: usize, seed: u64) -> MaskedEcg {
        let i: Vec<f32> = (0..width).map(|k| (k as f32 * 0.1).sin()).collect();
        let ii: Vec<f32> = (0..width).map(|k| (k as f32 * 0.07).cos()).collect();
        let v: Vec<f32> = (0..width).map(|k| ((k % 13) as f32 / 13.0) - 0.5).collect();
        let rec = crate::ecg::assemble_record("x", 51.2, &i, &ii, [&v, &v, &v, &v, &v, &v])
            .unwrap();
        let rec = minmax_normalize(&rec, NormalizeScope::PerRecord).unwrap().0;
        let mask = primer_mask(MaskConfig::Segment(3), width).unwrap();
        apply_mask(&rec, &mask, seed).unwrap()
    }

    #[test]
    fn forward_shape_and_range() {
        let model = Model::build(tiny_config(), 1).unwrap();
        let masked = masked_input(512, 2);
        let out = model.forward(&masked, Mode::Eval).unwrap();
        assert_eq!(out.len(), 512);
        assert!(out.samples().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn eval_forward_is_pure() {
        let model = Model::build(tiny_config(), 3).unwrap();
        let masked = masked_input(512, 4);
        let a = model.forward(&masked, Mode::Eval).unwrap();
        let b = model.forward(&masked, Mode::Eval).unwrap();
        assert_eq!(a.samples(), b.samples());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::build(tiny_config(), 11).unwrap();
        let b = Model::build(tiny_config(), 11).unwrap();
        let c = Model::build(tiny_config(), 12).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.tensor.data, pb.tensor.data, "{}", pa.name);
        }
        assert!(a.params().iter().zip(c.params()).any(|(x, y)| x.tensor.data != y.tensor.data));
    }

    #[test]
    fn parameter_count_matches_layer_arithmetic() {
        // Hand-summed for all-ones channel lists.
        let cfg = ModelConfig {
            enc2d_channels: [1, 1, 1, 1],
            enc1d_channels: [1, 1, 1, 1],
            transition_channels: 1,
            ..Default::default()
        };
        let model = Model::build(cfg, 0).unwrap();
        // cat = [2,2,2,2]; 2D convs: 15*(1*1 + 2*1 + 2*1 + 2*1) = 105;
        // 2D bn: 4*2 = 8; 1D convs: 12 * 5 * (1 + 1 + 1 + 1) = 240;
        // 1D bn: 12 * 4 * 2 = 96; transition: 2*1*39 = 78 + bn 2;
        // dec: (1+2)*1*12 + (1+2)*1*12 + (1+2)*1*12 + (1+2)*1*12 = 144,
        // dec bn: 3 * 2 = 6.
        let expected = 105 + 8 + 240 + 96 + 78 + 2 + 144 + 6;
        assert_eq!(model.parameter_count(), expected);
    }

    #[test]
    fn default_parameter_count_brackets_reference() {
        let model = Model::build(ModelConfig::default(), 0).unwrap();
        let count = model.parameter_count();
        assert_eq!(count, 5_330_400, "pinned regression value");
        assert!((3_000_000..=12_000_000).contains(&count));
    }

    #[test]
    fn count_invariant_to_seed() {
        let a = Model::build(tiny_config(), 5).unwrap();
        let b = Model::build(tiny_config(), 99).unwrap();
        assert_eq!(a.parameter_count(), b.parameter_count());
    }

    #[test]
    fn masked_cell_perturbation_reaches_output() {
        let model = Model::build(tiny_config(), 7).unwrap();
        let mut masked = masked_input(512, 8);
        let base = model.forward(&masked, Mode::Eval).unwrap();
        // Perturb one masked-region cell (lead I, past its primer window).
        let n = masked.n();
        let cell = 3 * n / 4;
        assert!(!masked.mask.keep(crate::ecg::LeadId::I, cell));
        masked.samples[cell] += 0.25;
        let bumped = model.forward(&masked, Mode::Eval).unwrap();
        let moved = base
            .samples()
            .iter()
            .zip(bumped.samples())
            .any(|(a, b)| (a - b).abs() > 0.0);
        assert!(moved, "output insensitive to masked-region input change");
    }

    #[test]
    fn rejects_wrong_width() {
        let model = Model::build(tiny_config(), 1).unwrap();
        let rec = EcgRecord::new("w", 51.2, vec![0.0; 12 * 256], 256).unwrap();
        let mut rec = rec;
        rec.set_normalized().unwrap();
        let masked = apply_mask(&rec, &PrimerMask::full(256), 1).unwrap();
        assert!(model.forward(&masked, Mode::Eval).is_err());
    }

    #[test]
    fn shared_1d_weights_shrink_params() {
        let mut cfg = tiny_config();
        let per_lead = Model::build(cfg.clone(), 0).unwrap().parameter_count();
        cfg.share_1d_weights = true;
        let shared = Model::build(cfg, 0).unwrap().parameter_count();
        assert!(shared < per_lead);
    }
}

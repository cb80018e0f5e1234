use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, MsimParams, TaskKind};
use crate::nn::{
    hyperfan_init, linear_forward, zero_init, BoundLinear, BoundMlp, HyperLinearLayer, LinearLayer, Mlp, Module,
};
use crate::rng::{self, streams};

/// Architecture and loss settings of a [`HydaModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub task_kind: TaskKind,
    /// Hidden widths of the primary encoder.
    pub encoder_widths: Vec<usize>,
    /// Hidden widths of the primary head; the output layer is appended.
    pub head_widths: Vec<usize>,
    /// 1-based indices of head layers whose parameters are generated.
    pub external_layers: Vec<usize>,
    /// Hidden widths of the domain encoder.
    pub domain_widths: Vec<usize>,
    /// Domain embedding width.
    pub embedding_dim: usize,
    /// Hypernetwork trunk width.
    pub hyper_hidden: usize,
    /// Manifest domain indices the domain classifier distinguishes.
    pub source_domains: Vec<usize>,
    pub loss_weights: LossWeights,
    pub msim: MsimParams,
    /// Feed the hypernetwork a detached copy of the domain embedding in the
    /// task step, so task gradients never reach the domain encoder.
    pub detach_domain_features: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 16,
            task_kind: TaskKind::Regression,
            encoder_widths: vec![32],
            head_widths: vec![32, 32, 16],
            external_layers: vec![3],
            domain_widths: vec![32],
            embedding_dim: 16,
            hyper_hidden: 64,
            source_domains: Vec::new(),
            loss_weights: LossWeights::default(),
            msim: MsimParams::default(),
            detach_domain_features: true,
        }
    }
}

impl ModelConfig {
    pub fn output_dim(&self) -> usize {
        match self.task_kind {
            TaskKind::Regression => 1,
            TaskKind::Classification => 2,
        }
    }

    pub fn head_len(&self) -> usize {
        self.head_widths.len() + 1
    }

    /// Input width of the head (last encoder width).
    fn head_in(&self) -> usize {
        self.encoder_widths.last().copied().unwrap_or(self.input_dim)
    }

    pub fn head_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.head_in()];
        s.extend(&self.head_widths);
        s.push(self.output_dim());
        s
    }

    pub fn encoder_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim];
        s.extend(&self.encoder_widths);
        s
    }

    /// Layer sizes of a plain network with the same internal layers.
    pub fn baseline_sizes(&self) -> Vec<usize> {
        let mut s = self.encoder_sizes();
        s.extend(&self.head_sizes()[1..]);
        s
    }

    pub fn external_mask(&self) -> Vec<bool> {
        (1..=self.head_len()).map(|i| self.external_layers.contains(&i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.input_dim == 0 {
            bad.push("input_dim must be >= 1".to_string());
        }
        if self.encoder_widths.is_empty() {
            bad.push("encoder_widths: the primary network needs at least one internal encoder layer".into());
        }
        let widths = self.encoder_widths.iter().chain(&self.head_widths).chain(&self.domain_widths);
        if widths.clone().any(|&w| w == 0) || self.embedding_dim == 0 || self.hyper_hidden == 0 {
            bad.push("layer widths must be >= 1".into());
        }
        for &l in &self.external_layers {
            if l == 0 || l > self.head_len() {
                bad.push(format!("external layer {l} outside head layers 1..={}", self.head_len()));
            }
        }
        if self.source_domains.len() < 2 {
            bad.push(format!("need >= 2 source domains, got {}", self.source_domains.len()));
        }
        if let Err(e) = self.loss_weights.validate() {
            bad.push(e.to_string());
        }
        if let Err(e) = self.msim.validate() {
            bad.push(e.to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config { fields: bad })
        }
    }
}

/// Domain encoder plus linear domain head.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainClassifier {
    pub encoder: Mlp,
    pub head: LinearLayer,
}

#[derive(Clone, Debug)]
pub struct BoundDomain {
    encoder: BoundMlp,
    head: BoundLinear,
}

impl DomainClassifier {
    pub fn embedding_dim(&self) -> usize {
        self.encoder.out_size()
    }

    pub fn num_domains(&self) -> usize {
        self.head.out_size()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundDomain {
        BoundDomain { encoder: self.encoder.bind(tape), head: self.head.bind(tape) }
    }

    pub fn bind_vars(&self, vars: &mut dyn Iterator<Item = Var>) -> Result<BoundDomain> {
        Ok(BoundDomain { encoder: self.encoder.bind_vars(vars)?, head: self.head.bind_vars(vars)? })
    }

    /// Returns `(logits, embedding)`.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundDomain, x: Var) -> Result<(Var, Var)> {
        let emb = self.embed(tape, bound, x)?;
        let logits = linear_forward(tape, &bound.head, emb)?;
        Ok((logits, emb))
    }

    pub fn embed(&self, tape: &mut Tape, bound: &BoundDomain, x: Var) -> Result<Var> {
        let xs = tape.shape(x);
        if xs.len() != 2 || xs[1] != self.encoder.in_size() {
            return Err(Error::dim(
                "domain_forward",
                format!("input {xs:?} for domain encoder width {}", self.encoder.in_size()),
            ));
        }
        self.encoder.forward(tape, &bound.encoder, x, &[])
    }

    /// Weight matrices only, in binding order.
    pub fn bound_weights(bound: &BoundDomain) -> Vec<Var> {
        let mut w = Mlp::bound_weights(&bound.encoder);
        w.push(bound.head.weight);
        w
    }
}

impl Module for DomainClassifier {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> =
            self.encoder.named_params().into_iter().map(|(n, t)| (format!("domain.encoder.{n}"), t)).collect();
        out.extend(self.head.named_params().into_iter().map(|(n, t)| (format!("domain.head.{n}"), t)));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.params_mut();
        out.extend(self.head.params_mut());
        out
    }
}

/// Output heads for one external primary layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperHead {
    /// 1-based head layer index of the primary network.
    pub layer: usize,
    pub target: HyperLinearLayer,
    /// Emits the flattened `[N, O]` weight matrix.
    pub weight_head: LinearLayer,
    /// Emits the `[O]` bias.
    pub bias_head: LinearLayer,
}

/// Shared `linear + ReLU` trunk with one linear weight head and one linear
/// bias head per external layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypernetwork {
    pub trunk: LinearLayer,
    pub heads: Vec<HyperHead>,
}

#[derive(Clone, Debug)]
pub struct BoundHyper {
    trunk: BoundLinear,
    heads: Vec<(BoundLinear, BoundLinear)>,
}

/// Per-sample parameters generated for one external layer.
#[derive(Clone, Copy, Debug)]
pub struct GeneratedVars {
    pub layer: usize,
    /// `[B, N, O]`
    pub weights: Var,
    /// `[B, O]`
    pub biases: Var,
    /// `[B, N·O]`, same values as `weights`.
    pub weights_flat: Var,
}

/// Concrete values of [`GeneratedVars`].
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedParams {
    pub layer: usize,
    pub weights: Tensor,
    pub biases: Tensor,
}

impl Hypernetwork {
    pub fn bind(&self, tape: &mut Tape) -> BoundHyper {
        BoundHyper {
            trunk: self.trunk.bind(tape),
            heads: self.heads.iter().map(|h| (h.weight_head.bind(tape), h.bias_head.bind(tape))).collect(),
        }
    }

    pub fn bind_vars(&self, vars: &mut dyn Iterator<Item = Var>) -> Result<BoundHyper> {
        let trunk = self.trunk.bind_vars(vars)?;
        let heads = self
            .heads
            .iter()
            .map(|h| Ok((h.weight_head.bind_vars(vars)?, h.bias_head.bind_vars(vars)?)))
            .collect::<Result<_>>()?;
        Ok(BoundHyper { trunk, heads })
    }

    pub fn generate(&self, tape: &mut Tape, bound: &BoundHyper, emb: Var) -> Result<Vec<GeneratedVars>> {
        let es = tape.shape(emb);
        if es.len() != 2 || es[1] != self.trunk.in_size() {
            return Err(Error::dim(
                "generate_external_params",
                format!("embedding {es:?} for trunk width {}", self.trunk.in_size()),
            ));
        }
        let batch = es[0];
        let t = linear_forward(tape, &bound.trunk, emb)?;
        let t = tape.relu(t)?;
        let mut out = Vec::with_capacity(self.heads.len());
        for (head, (wb, bb)) in self.heads.iter().zip(&bound.heads) {
            let (n, o) = (head.target.in_size, head.target.out_size);
            let flat = linear_forward(tape, wb, t)?;
            let weights = tape.reshape(flat, &[batch, n, o])?;
            let biases = linear_forward(tape, bb, t)?;
            out.push(GeneratedVars { layer: head.layer, weights, biases, weights_flat: flat });
        }
        Ok(out)
    }

    /// Weight matrices only, in binding order.
    pub fn bound_weights(bound: &BoundHyper) -> Vec<Var> {
        let mut w = vec![bound.trunk.weight];
        for (wh, bh) in &bound.heads {
            w.push(wh.weight);
            w.push(bh.weight);
        }
        w
    }
}

impl Module for Hypernetwork {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> =
            self.trunk.named_params().into_iter().map(|(n, t)| (format!("hyper.trunk.{n}"), t)).collect();
        for h in &self.heads {
            for (n, t) in h.weight_head.named_params() {
                out.push((format!("hyper.layer{}.weight_head.{n}", h.layer), t));
            }
            for (n, t) in h.bias_head.named_params() {
                out.push((format!("hyper.layer{}.bias_head.{n}", h.layer), t));
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.trunk.params_mut();
        for h in &mut self.heads {
            out.extend(h.weight_head.params_mut());
            out.extend(h.bias_head.params_mut());
        }
        out
    }
}

/// Internal encoder followed by a head whose masked layers take generated
/// parameters. A ReLU joins encoder and head.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimaryNetwork {
    pub encoder: Mlp,
    pub head: Mlp,
}

#[derive(Clone, Debug)]
pub struct BoundPrimary {
    encoder: BoundMlp,
    head: BoundMlp,
}

impl PrimaryNetwork {
    pub fn bind(&self, tape: &mut Tape) -> BoundPrimary {
        BoundPrimary { encoder: self.encoder.bind(tape), head: self.head.bind(tape) }
    }

    pub fn bind_vars(&self, vars: &mut dyn Iterator<Item = Var>) -> Result<BoundPrimary> {
        Ok(BoundPrimary { encoder: self.encoder.bind_vars(vars)?, head: self.head.bind_vars(vars)? })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundPrimary, x: Var, generated: &[GeneratedVars]) -> Result<Var> {
        let ext = self.head.external_layers();
        if ext.len() != generated.len() || ext.iter().zip(generated).any(|((pos, _), g)| pos + 1 != g.layer) {
            return Err(Error::Contract(format!(
                "external layers {:?} do not match generated parameters for layers {:?}",
                ext.iter().map(|(p, _)| p + 1).collect::<Vec<_>>(),
                generated.iter().map(|g| g.layer).collect::<Vec<_>>()
            )));
        }
        let xs = tape.shape(x);
        if xs.len() != 2 || xs[1] != self.encoder.in_size() {
            return Err(Error::dim(
                "primary_forward",
                format!("input {xs:?} for encoder width {}", self.encoder.in_size()),
            ));
        }
        let h = self.encoder.forward(tape, &bound.encoder, x, &[])?;
        let h = tape.relu(h)?;
        let params: Vec<(Var, Var)> = generated.iter().map(|g| (g.weights, g.biases)).collect();
        self.head.forward(tape, &bound.head, h, &params)
    }

    pub fn bound_weights(bound: &BoundPrimary) -> Vec<Var> {
        let mut w = Mlp::bound_weights(&bound.encoder);
        w.extend(Mlp::bound_weights(&bound.head));
        w
    }
}

impl Module for PrimaryNetwork {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> =
            self.encoder.named_params().into_iter().map(|(n, t)| (format!("primary.encoder.{n}"), t)).collect();
        out.extend(self.head.named_params().into_iter().map(|(n, t)| (format!("primary.head.{n}"), t)));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.params_mut();
        out.extend(self.head.params_mut());
        out
    }
}

/// Handles of every model parameter on one tape.
#[derive(Clone, Debug)]
pub struct BoundHyda {
    pub domain: BoundDomain,
    pub hyper: BoundHyper,
    pub primary: BoundPrimary,
}

/// Domain classifier, hypernetwork and primary network.
#[derive(Clone, Debug, PartialEq)]
pub struct HydaModel {
    pub config: ModelConfig,
    pub domain: DomainClassifier,
    pub hyper: Hypernetwork,
    pub primary: PrimaryNetwork,
}

/// Primary-network initialisation shared with the plain baseline: encoder
/// then head layers drawn in order from the primary stream, including the
/// draws for external layers, so internal layers match across masks.
pub(crate) fn init_primary(config: &ModelConfig, seed: u64) -> Result<PrimaryNetwork> {
    let mut r = rng::stream(seed, streams::PRIMARY_INIT);
    let encoder = Mlp::internal(&config.encoder_sizes(), &mut r)?;
    let head_sizes = config.head_sizes();
    let full = Mlp::internal(&head_sizes, &mut r)?;
    let mask = config.external_mask();
    let layers = full
        .layers()
        .iter()
        .zip(&mask)
        .map(|(layer, &ext)| {
            if ext {
                crate::nn::MlpLayer::External(HyperLinearLayer { in_size: layer.in_size(), out_size: layer.out_size() })
            } else {
                layer.clone()
            }
        })
        .collect();
    Ok(PrimaryNetwork { encoder, head: Mlp::new(layers)? })
}

impl HydaModel {
    /// Builds a freshly initialised model. Each component draws from its own
    /// stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let primary = init_primary(&config, seed)?;

        let mut r = rng::stream(seed, streams::DOMAIN_INIT);
        let mut dsizes = vec![config.input_dim];
        dsizes.extend(&config.domain_widths);
        dsizes.push(config.embedding_dim);
        let domain = DomainClassifier {
            encoder: Mlp::internal(&dsizes, &mut r)?,
            head: LinearLayer::kaiming(config.embedding_dim, config.source_domains.len(), &mut r),
        };

        let mut r = rng::stream(seed, streams::HYPER_INIT);
        let trunk = LinearLayer::kaiming(config.embedding_dim, config.hyper_hidden, &mut r);
        let heads = primary
            .head
            .external_layers()
            .into_iter()
            .map(|(pos, target)| {
                let mut weight_head = LinearLayer::kaiming(config.hyper_hidden, target.weight_len(), &mut r);
                hyperfan_init(&mut weight_head, target.in_size, &mut r);
                let mut bias_head = LinearLayer::kaiming(config.hyper_hidden, target.out_size, &mut r);
                zero_init(&mut bias_head);
                HyperHead { layer: pos + 1, target, weight_head, bias_head }
            })
            .collect();

        Ok(HydaModel { config, domain, hyper: Hypernetwork { trunk, heads }, primary })
    }

    pub fn has_external_layers(&self) -> bool {
        !self.hyper.heads.is_empty()
    }

    /// Registers every parameter on `tape` in `named_params` order.
    pub fn bind(&self, tape: &mut Tape) -> BoundHyda {
        let domain = self.domain.bind(tape);
        let primary = self.primary.bind(tape);
        let hyper = self.hyper.bind(tape);
        BoundHyda { domain, hyper, primary }
    }

    /// Binds to existing handles, one per tensor of `named_params`.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundHyda> {
        let mut it = vars.iter().copied();
        let domain = self.domain.bind_vars(&mut it)?;
        let primary = self.primary.bind_vars(&mut it)?;
        let hyper = self.hyper.bind_vars(&mut it)?;
        if it.next().is_some() {
            return Err(Error::Contract("more handles than parameters".into()));
        }
        Ok(BoundHyda { domain, hyper, primary })
    }

    /// Class index of a manifest domain, if the classifier knows it.
    pub fn domain_class(&self, domain: usize) -> Option<usize> {
        self.config.source_domains.iter().position(|&d| d == domain)
    }

    /// Domain logits `[B, K]` and embedding `[B, F]`.
    pub fn domain_forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.domain.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let (logits, emb) = self.domain.forward(&mut tape, &bound, xv)?;
        Ok((tape.value(logits).clone(), tape.value(emb).clone()))
    }

    pub fn generate_external_params(&self, emb: &Tensor) -> Result<Vec<GeneratedParams>> {
        let mut tape = Tape::new();
        let bound = self.hyper.bind(&mut tape);
        let e = tape.constant(emb.clone());
        let gen = self.hyper.generate(&mut tape, &bound, e)?;
        Ok(gen
            .iter()
            .map(|g| GeneratedParams {
                layer: g.layer,
                weights: tape.value(g.weights).clone(),
                biases: tape.value(g.biases).clone(),
            })
            .collect())
    }

    /// Primary output for inputs `x` under domain embeddings `emb`, which may
    /// come from any source (used for counterfactual probing).
    pub fn primary_forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        if x.shape().first() != emb.shape().first() {
            return Err(Error::dim("primary_forward", format!("x {:?} vs emb {:?}", x.shape(), emb.shape())));
        }
        let mut tape = Tape::new();
        let bh = self.hyper.bind(&mut tape);
        let bp = self.primary.bind(&mut tape);
        let e = tape.constant(emb.clone());
        let gen = self.hyper.generate(&mut tape, &bh, e)?;
        let xv = tape.constant(x.clone());
        let y = self.primary.forward(&mut tape, &bp, xv, &gen)?;
        Ok(tape.value(y).clone())
    }

    /// Test-time prediction: embeds `x`, generates the external parameters
    /// and runs the primary network. Needs no labels or domain identity and
    /// changes no state.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = self.predict_on(&mut tape, &bound, xv)?;
        Ok(tape.value(y).clone())
    }

    pub(crate) fn predict_on(&self, tape: &mut Tape, bound: &BoundHyda, x: Var) -> Result<Var> {
        let gen = if self.has_external_layers() {
            let emb = self.domain.embed(tape, &bound.domain, x)?;
            self.hyper.generate(tape, &bound.hyper, emb)?
        } else {
            Vec::new()
        };
        self.primary.forward(tape, &bound.primary, x, &gen)
    }

    /// Domain embeddings of `x`, one row per sample.
    pub fn extract_domain_embeddings(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.domain_forward(x)?.1)
    }

    /// Parameters trained by the domain loss.
    pub fn domain_named_params(&self) -> Vec<(String, &Tensor)> {
        self.domain.named_params()
    }

    /// Parameters trained by the regularised task loss: primary internals
    /// then the hypernetwork.
    pub fn task_named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.primary.named_params();
        out.extend(self.hyper.named_params());
        out
    }

    pub fn task_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.primary.params_mut();
        out.extend(self.hyper.params_mut());
        out
    }

    /// Task-group handles in the order of [`Self::task_named_params`].
    pub(crate) fn task_vars(bound: &BoundHyda) -> Vec<Var> {
        let mut out = Vec::new();
        for b in bound.primary.encoder.linear_handles().iter().chain(bound.primary.head.linear_handles().iter()) {
            out.push(b.weight);
            out.push(b.bias);
        }
        out.push(bound.hyper.trunk.weight);
        out.push(bound.hyper.trunk.bias);
        for (w, b) in &bound.hyper.heads {
            out.extend([w.weight, w.bias, b.weight, b.bias]);
        }
        out
    }

    pub(crate) fn domain_vars(bound: &BoundHyda) -> Vec<Var> {
        Self::domain_vars_of(&bound.domain)
    }

    pub(crate) fn domain_vars_of(bound: &BoundDomain) -> Vec<Var> {
        let mut out = Vec::new();
        for b in bound.encoder.linear_handles() {
            out.push(b.weight);
            out.push(b.bias);
        }
        out.push(bound.head.weight);
        out.push(bound.head.bias);
        out
    }

    /// SHA-256 over every parameter, in a fixed order.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.named_params() {
            h.update(name.as_bytes());
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

impl Module for HydaModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.domain_named_params();
        out.extend(self.task_named_params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.domain.params_mut();
        out.extend(self.primary.params_mut());
        out.extend(self.hyper.params_mut());
        out
    }
}

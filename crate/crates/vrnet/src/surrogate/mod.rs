//! The spectrally normalized surrogate: a residual CNN trunk over rendered
//! microstructure images, an MLP head predicting bounded spectral parameters,
//! and the inverse spectral transform that turns those into an effective
//! stiffness guaranteed to sit inside the Voigt-Reuss envelope.

mod checkpoint;
mod train;

pub use checkpoint::CheckpointManifest;
pub use train::{train, EpochMetric, TrainConfig, TrainReport};

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bounds::{reuss_bound, voigt_bound, PhasePair};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::mandel::{loewner_leq, plane_strain_stiffness, IsotropicPhase, MandelMatrix};
use crate::microgen::{
    embed_center, field, range_normalize, threshold_soft, AmplitudeGrid, MicroImage, MicroSpec,
    PAD_SIZE,
};
use crate::netgraph::{
    fan_in_init, BnState, Graph, NodeId, ParamStore, RenderTables, Tensor,
};
use crate::specnorm::{
    denormalize, dof_to_tilde, factor_gap, normalize, NormalizedDOF, NormalizedTensor,
    SpectralFactor, DEFAULT_EPS,
};

/// Volume fractions are quantized to this resolution when looking up cached
/// spectral factors; the factor is treated as constant within a bucket.
pub const C0_BUCKETS: f64 = 1e4;

/// Architecture of the surrogate. The paper-scale sizes are the defaults;
/// `scale` shrinks channel counts and MLP widths for desk-scale training.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kernels: [usize; 4],
    pub channels: [usize; 4],
    pub mlp_widths: Vec<usize>,
    pub out_dim: usize,
    pub aux_dim: usize,
    pub scale: f64,
    pub resolution: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kernels: [3, 5, 7, 9],
            channels: [18, 24, 30, 36],
            mlp_widths: vec![256, 128, 64, 64, 64],
            out_dim: 6,
            aux_dim: 2,
            scale: 0.5,
            resolution: 100,
            temperature: crate::microgen::T_PRODUCTION,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn scaled_channels(&self) -> [usize; 4] {
        let mut out = [0; 4];
        for (o, c) in out.iter_mut().zip(self.channels) {
            *o = ((c as f64 * self.scale).round() as usize).max(1);
        }
        out
    }

    pub fn scaled_widths(&self) -> Vec<usize> {
        self.mlp_widths
            .iter()
            .map(|&w| ((w as f64 * self.scale).round() as usize).max(4))
            .collect()
    }

    /// Feature count after the four pooled residual blocks.
    pub fn flat_dim(&self) -> usize {
        let mut h = self.resolution;
        for _ in 0..4 {
            h /= 2;
        }
        self.scaled_channels()[3] * h * h
    }

    fn validate(&self) -> Result<()> {
        if self.out_dim != 6 || self.aux_dim != 2 {
            return Err(Error::InvalidArgument(
                "plane-strain head needs 6 outputs and 2 auxiliary scalars".into(),
            ));
        }
        if self.resolution < 16 || self.resolution % 16 != 0 && self.resolution != 100 {
            // four pooling stages; 100 floors to 6 like the reference setup
            if self.resolution / 16 == 0 {
                return Err(Error::InvalidArgument(format!(
                    "resolution {} too small for four pooling stages",
                    self.resolution
                )));
            }
        }
        if !(self.scale > 0.0 && self.temperature > 0.0) {
            return Err(Error::InvalidArgument("scale and temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// One labeled unit cell for training/evaluation.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub grid: AmplitudeGrid,
    pub tau: f64,
    pub c0: f64,
    pub cbar: MandelMatrix,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Sample with its rendered image and normalized label, ready for batching.
pub struct PreparedSample {
    pub image: Vec<f64>,
    pub c0: f64,
    pub tau: f64,
    pub label: Tensor,
    pub split: Split,
}

pub(crate) struct LayerIds {
    pub name: String,
    pub pid: usize,
}

/// The assembled surrogate: parameters, batch-norm states and the fixed
/// phase pair whose bounds drive the spectral transform.
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub(crate) bn: Vec<BnState>,
    pub(crate) layout: Vec<LayerIds>,
    tables: Arc<RenderTables>,
    phases: (IsotropicPhase, IsotropicPhase),
    factor_cache: HashMap<u64, Arc<SpectralFactor>>,
}

impl Model {
    pub fn new(cfg: ModelConfig, phases: (IsotropicPhase, IsotropicPhase)) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let mut layout = Vec::new();
        let mut bn = Vec::new();

        let chans = cfg.scaled_channels();
        let mut c_in = 1usize;
        for (i, (&c_out, &k)) in chans.iter().zip(&cfg.kernels).enumerate() {
            let mut add = |name: String, t: Tensor, decay: bool, store: &mut ParamStore| {
                let pid = store.add(t, decay);
                layout.push(LayerIds { name, pid });
            };
            let fan = c_in * k * k;
            add(
                format!("block{i}.conv.weight"),
                fan_in_init(&mut rng, &[c_out, c_in, k, k], fan),
                true,
                &mut store,
            );
            add(format!("block{i}.conv.bias"), fan_in_init(&mut rng, &[c_out], fan), false, &mut store);
            add(format!("block{i}.bn.gamma"), Tensor::from_vec(&[c_out], vec![1.0; c_out]), false, &mut store);
            add(format!("block{i}.bn.beta"), Tensor::zeros(&[c_out]), false, &mut store);
            bn.push(BnState::new(c_out));
            add(
                format!("block{i}.skip.weight"),
                fan_in_init(&mut rng, &[c_out, c_in, 1, 1], c_in),
                true,
                &mut store,
            );
            add(format!("block{i}.skip.bias"), fan_in_init(&mut rng, &[c_out], c_in), false, &mut store);
            add(format!("block{i}.skipbn.gamma"), Tensor::from_vec(&[c_out], vec![1.0; c_out]), false, &mut store);
            add(format!("block{i}.skipbn.beta"), Tensor::zeros(&[c_out]), false, &mut store);
            bn.push(BnState::new(c_out));
            c_in = c_out;
        }

        let mut width_in = cfg.flat_dim() + cfg.aux_dim;
        for (i, &w) in cfg.scaled_widths().iter().enumerate() {
            let pid = store.add(fan_in_init(&mut rng, &[width_in, w], width_in), true);
            layout.push(LayerIds { name: format!("mlp{i}.weight"), pid });
            let pid = store.add(fan_in_init(&mut rng, &[w], width_in), false);
            layout.push(LayerIds { name: format!("mlp{i}.bias"), pid });
            let pid = store.add(Tensor::from_vec(&[w], vec![1.0; w]), false);
            layout.push(LayerIds { name: format!("mlp{i}.bn.gamma"), pid });
            let pid = store.add(Tensor::zeros(&[w]), false);
            layout.push(LayerIds { name: format!("mlp{i}.bn.beta"), pid });
            bn.push(BnState::new(w));
            width_in = w;
        }
        let pid = store.add(fan_in_init(&mut rng, &[width_in, cfg.out_dim], width_in), true);
        layout.push(LayerIds { name: "head.weight".into(), pid });
        let pid = store.add(fan_in_init(&mut rng, &[cfg.out_dim], width_in), false);
        layout.push(LayerIds { name: "head.bias".into(), pid });

        let tables = Arc::new(RenderTables::new(PAD_SIZE, cfg.resolution, cfg.resolution));
        Ok(Model { cfg, store, bn, layout, tables, phases, factor_cache: HashMap::new() })
    }

    pub fn phases(&self) -> (IsotropicPhase, IsotropicPhase) {
        self.phases
    }

    pub fn param_ids(&self) -> Vec<usize> {
        self.layout.iter().map(|l| l.pid).collect()
    }

    pub fn render_tables(&self) -> Arc<RenderTables> {
        Arc::clone(&self.tables)
    }

    fn pid(&self, name: &str) -> usize {
        self.layout
            .iter()
            .find(|l| l.name == name)
            .unwrap_or_else(|| panic!("unknown layer {name}"))
            .pid
    }

    /// Spectral factor for the quantized volume fraction; cached because the
    /// factor depends only on c0 for the fixed phase pair.
    pub fn factor_for_c0(&mut self, c0: f64) -> Result<Arc<SpectralFactor>> {
        let key = (c0.clamp(0.0, 1.0) * C0_BUCKETS).round() as u64;
        if let Some(f) = self.factor_cache.get(&key) {
            return Ok(Arc::clone(f));
        }
        let cq = key as f64 / C0_BUCKETS;
        let pair = PhasePair::new(
            plane_strain_stiffness(&self.phases.0),
            plane_strain_stiffness(&self.phases.1),
            cq,
        )?;
        let v = voigt_bound(&pair);
        let r = reuss_bound(&pair)?;
        let f = Arc::new(factor_gap(&v, &r, DEFAULT_EPS)?);
        self.factor_cache.insert(key, Arc::clone(&f));
        Ok(f)
    }

    /// Injects one weight into the graph. Weights become constants whenever
    /// their gradients are not needed (inference, validation, inverse
    /// design); a graph must only ever contain parameters of a single store,
    /// and during design that store holds the design variables.
    fn weight(&self, g: &mut Graph, name: &str, trainable: bool) -> NodeId {
        let pid = self.pid(name);
        if trainable {
            g.param(&self.store, pid)
        } else {
            g.constant(self.store.value(pid).clone())
        }
    }

    /// CNN trunk + MLP head on a [B,1,H,W] image node and [B,2] auxiliary
    /// node; returns the bounded spectral outputs [B,6]. `bn_training`
    /// selects batch vs running statistics; `trainable` exposes the weights
    /// as graph parameters (training steps only).
    pub fn forward_trunk(
        &mut self,
        g: &mut Graph,
        images: NodeId,
        aux: NodeId,
        bn_training: bool,
        trainable: bool,
    ) -> Result<NodeId> {
        let mut bn_idx = 0usize;
        let mut x = images;
        for (i, &k) in self.cfg.kernels.iter().enumerate() {
            let w = self.weight(g, &format!("block{i}.conv.weight"), trainable);
            let b = self.weight(g, &format!("block{i}.conv.bias"), trainable);
            let gamma = self.weight(g, &format!("block{i}.bn.gamma"), trainable);
            let beta = self.weight(g, &format!("block{i}.bn.beta"), trainable);
            let conv = g.conv2d_periodic(x, w, b, k);
            let norm = g.batchnorm(conv, gamma, beta, &mut self.bn[bn_idx], bn_training)?;
            bn_idx += 1;
            let act = g.relu(norm);
            let main = g.avgpool2(act);

            let ws = self.weight(g, &format!("block{i}.skip.weight"), trainable);
            let bs = self.weight(g, &format!("block{i}.skip.bias"), trainable);
            let gs = self.weight(g, &format!("block{i}.skipbn.gamma"), trainable);
            let bts = self.weight(g, &format!("block{i}.skipbn.beta"), trainable);
            let skip_conv = g.conv2d_periodic(x, ws, bs, 1);
            let skip_norm = g.batchnorm(skip_conv, gs, bts, &mut self.bn[bn_idx], bn_training)?;
            bn_idx += 1;
            let skip = g.avgpool2(skip_norm);

            let merged = g.add(main, skip);
            x = g.relu(merged);
        }
        let flat = g.flatten(x);
        let mut h = g.concat1(flat, aux);
        for i in 0..self.cfg.scaled_widths().len() {
            let w = self.weight(g, &format!("mlp{i}.weight"), trainable);
            let b = self.weight(g, &format!("mlp{i}.bias"), trainable);
            let gamma = self.weight(g, &format!("mlp{i}.bn.gamma"), trainable);
            let beta = self.weight(g, &format!("mlp{i}.bn.beta"), trainable);
            let lin = g.dense(h, w, b);
            let norm = g.batchnorm(lin, gamma, beta, &mut self.bn[bn_idx], bn_training)?;
            bn_idx += 1;
            h = g.mixed_activation(norm);
        }
        let w = self.weight(g, "head.weight", trainable);
        let b = self.weight(g, "head.bias", trainable);
        let logits = g.dense(h, w, b);
        Ok(g.sigmoid(logits))
    }

    /// Normalized tensor Ytilde = Q(xi_q) diag(xi_lambda) Q(xi_q)^T from one
    /// [6] row of bounded outputs.
    pub fn ytilde_head(&self, g: &mut Graph, xi_row: NodeId) -> NodeId {
        let lam = g.slice_flat(xi_row, 0, 3);
        let q = g.slice_flat(xi_row, 3, 3);
        let w = g.affine(q, 2.0 * std::f64::consts::PI, -std::f64::consts::PI);
        let skew = g.skew_from_vec(w);
        let rot = g.expm_pade(skew);
        let lam_m = g.diag_from_vec(lam);
        let ql = g.matmul(rot, lam_m);
        let qt = g.transpose_sq(rot);
        g.matmul(ql, qt)
    }

    /// phi = ||Ytilde - label||_F / sqrt(3) as a graph scalar.
    pub fn phi_node(&self, g: &mut Graph, ytilde: NodeId, label: &Tensor) -> NodeId {
        let lab = g.constant(label.clone());
        let diff = g.sub(ytilde, lab);
        let norm = g.frobenius_norm(diff);
        g.affine(norm, 1.0 / 3.0_f64.sqrt(), 0.0)
    }

    /// Effective stiffness node C = V - L Ytilde L^T with the factor frozen
    /// at the sample's quantized volume fraction (constants in the graph).
    pub fn cbar_head(&self, g: &mut Graph, ytilde: NodeId, factor: &SpectralFactor) -> NodeId {
        let m = factor.dim();
        let l = g.constant(Tensor::from_vec(&[m, m], factor.l().data().to_vec()));
        let lt = g.constant(Tensor::from_vec(&[m, m], factor.l().transpose().data().to_vec()));
        let v = g.constant(Tensor::from_vec(&[m, m], factor.voigt().as_mat().data().to_vec()));
        let ly = g.matmul(l, ytilde);
        let lyl = g.matmul(ly, lt);
        g.sub(v, lyl)
    }

    /// Differentiable render of one design sample: soft image [H,W] plus the
    /// phase-0 volume fraction node.
    pub fn render_design(
        &self,
        g: &mut Graph,
        amplitude: NodeId,
        tau01: NodeId,
        temperature: f64,
    ) -> (NodeId, NodeId) {
        let fld = g.cos_field(amplitude, &self.tables);
        let norm = g.range_normalize(fld);
        let chi = g.soft_threshold(norm, tau01, temperature);
        let c1 = g.mean_all(chi);
        let c0 = g.affine(c1, -1.0, 1.0);
        (chi, c0)
    }

    /// Full differentiable design forward: renders every (A, tau) pair,
    /// runs the trunk with frozen (constant) weights and reconstructs
    /// per-sample stiffness nodes with factors pinned at the rendered,
    /// quantized volume fractions. Gradients flow to the design variables
    /// through both the image and the auxiliary inputs.
    pub fn forward_design(
        &mut self,
        g: &mut Graph,
        designs: &[(NodeId, NodeId)],
        temperature: f64,
        bn_training: bool,
    ) -> Result<DesignBatch> {
        let mut chis = Vec::with_capacity(designs.len());
        let mut aux_rows = Vec::with_capacity(designs.len());
        let mut c0_values = Vec::with_capacity(designs.len());
        for &(a, tau01) in designs {
            let (chi, c0) = self.render_design(g, a, tau01, temperature);
            c0_values.push(g.value(c0).item());
            let aux = g.stack1(&[c0, tau01]);
            chis.push(chi);
            aux_rows.push(aux);
        }
        let images = g.stack_images(&chis);
        let aux = g.stack_rows(&aux_rows);
        let xi = self.forward_trunk(g, images, aux, bn_training, false)?;
        let mut cbars = Vec::with_capacity(designs.len());
        let mut ytildes = Vec::with_capacity(designs.len());
        for (b, &c0) in c0_values.iter().enumerate() {
            let factor = self.factor_for_c0(c0)?;
            let row = g.slice_row(xi, b);
            let yt = self.ytilde_head(g, row);
            cbars.push(self.cbar_head(g, yt, &factor));
            ytildes.push(yt);
        }
        Ok(DesignBatch { xi, cbars, ytildes, c0_values, chis })
    }

    /// Renders a spec with the model's production settings (plain, no graph).
    pub fn render_spec(&self, spec: &MicroSpec) -> Result<MicroImage> {
        let f = range_normalize(&field(spec, self.cfg.resolution, self.cfg.resolution)?);
        threshold_soft(&f, spec.tau(), self.cfg.temperature)
    }

    /// Prepares samples: renders inputs and normalizes labels once.
    pub fn prepare(&mut self, samples: &[TrainSample]) -> Result<Vec<PreparedSample>> {
        samples
            .iter()
            .map(|s| {
                let spec = MicroSpec::new(&s.grid, s.tau, self.cfg.temperature)?;
                let img = self.render_spec(&spec)?;
                let factor = self.factor_for_c0(s.c0)?;
                let label = normalize(&s.cbar, &factor)?;
                Ok(PreparedSample {
                    image: img.values().to_vec(),
                    c0: s.c0,
                    tau: s.tau,
                    label: Tensor::from_vec(&[3, 3], label.ytilde().data().to_vec()),
                    split: s.split,
                })
            })
            .collect()
    }

    /// Batched forward on prepared samples; returns the xi node. Training
    /// mode exposes the weights as parameters and uses batch statistics.
    pub fn forward_prepared(
        &mut self,
        g: &mut Graph,
        batch: &[&PreparedSample],
        training: bool,
    ) -> Result<NodeId> {
        let res = self.cfg.resolution;
        let mut pixels = Vec::with_capacity(batch.len() * res * res);
        let mut aux = Vec::with_capacity(batch.len() * 2);
        for s in batch {
            pixels.extend_from_slice(&s.image);
            aux.push(s.c0);
            aux.push(s.tau);
        }
        let images = g.constant(Tensor::from_vec(&[batch.len(), 1, res, res], pixels));
        let aux = g.constant(Tensor::from_vec(&[batch.len(), 2], aux));
        self.forward_trunk(g, images, aux, training, training)
    }

    /// Mean phi loss over a batch; also returns per-sample Ytilde nodes for
    /// admissibility checks.
    pub fn batch_loss(
        &mut self,
        g: &mut Graph,
        xi: NodeId,
        batch: &[&PreparedSample],
    ) -> (NodeId, Vec<NodeId>) {
        let mut phis = Vec::with_capacity(batch.len());
        let mut ytildes = Vec::with_capacity(batch.len());
        for (b, s) in batch.iter().enumerate() {
            let row = g.slice_row(xi, b);
            let yt = self.ytilde_head(g, row);
            phis.push(self.phi_node(g, yt, &s.label));
            ytildes.push(yt);
        }
        let stacked = g.stack1(&phis);
        (g.mean_all(stacked), ytildes)
    }

    /// Checks that a normalized-tensor value reconstructs inside the
    /// envelope for the given volume fraction.
    pub fn admissible(&mut self, ytilde: &Mat, c0: f64, tol: f64) -> Result<bool> {
        let factor = self.factor_for_c0(c0)?;
        let yt = NormalizedTensor::new(ytilde.clone())?;
        let c = denormalize(&yt, &factor);
        Ok(loewner_leq(factor.reuss(), &c, tol)? && loewner_leq(&c, factor.voigt(), tol)?)
    }

    /// Single-input inference; trained batch-norm statistics must exist.
    /// The auxiliary volume fraction always comes from the supplied image;
    /// the raw-image path falls back to tau := c0 when no threshold exists.
    pub fn predict(&mut self, input: ForwardInput) -> Result<Prediction> {
        let (image, tau_aux, tau_from_c0) = match input {
            ForwardInput::Spec(spec) => {
                let img = self.render_spec(spec)?;
                (img.values().to_vec(), spec.tau(), false)
            }
            ForwardInput::Image { img, tau } => {
                if img.width() != self.cfg.resolution || img.height() != self.cfg.resolution {
                    return Err(Error::DimMismatch(format!(
                        "image is {}x{}, model expects {}",
                        img.width(),
                        img.height(),
                        self.cfg.resolution
                    )));
                }
                let fallback = tau.is_none();
                (img.values().to_vec(), tau.unwrap_or(img.c0()), fallback)
            }
        };
        let c0 = 1.0 - image.iter().sum::<f64>() / image.len() as f64;

        let res = self.cfg.resolution;
        let mut g = Graph::new();
        let images = g.constant(Tensor::from_vec(&[1, 1, res, res], image));
        let aux = g.constant(Tensor::from_vec(&[1, 2], vec![c0, tau_aux]));
        let xi_node = self.forward_trunk(&mut g, images, aux, false, false)?;
        let xi_vals = g.value(xi_node).data().to_vec();
        let mut xi = [0.0; 6];
        xi.copy_from_slice(&xi_vals);

        // sigmoid outputs can round to exactly 0/1 in f64 on saturated
        // logits; nudge back into the open interval
        let lam: Vec<f64> = xi[..3].iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let q: Vec<f64> = xi[3..].iter().map(|v| v.clamp(1e-12, 1.0 - 1e-12)).collect();
        let dof = NormalizedDOF::new(lam, q)?;
        let ytilde = dof_to_tilde(&dof);
        let factor = self.factor_for_c0(c0)?;
        let cbar = denormalize(&ytilde, &factor);
        let envelope_ok = loewner_leq(factor.reuss(), &cbar, 1e-9)?
            && loewner_leq(&cbar, factor.voigt(), 1e-9)?;
        Ok(Prediction { xi, cbar, ytilde, c0, tau_aux, tau_from_c0, envelope_ok })
    }

    /// Threshold sensitivity of the trained surrogate: prediction norm, its
    /// derivative with respect to tau (by backprop through the renderer at
    /// the production temperature) and the error against the oracle.
    pub fn tau_sensitivity(
        &mut self,
        grid: &AmplitudeGrid,
        n_tau: usize,
        oracle: Option<&crate::fftsolver::SolverConfig>,
    ) -> Result<Vec<TauSensRow>> {
        let padded = embed_center(grid, PAD_SIZE)?;
        let mut rows = Vec::with_capacity(n_tau);
        for tau in crate::microgen::equispaced_taus(n_tau) {
            let mut design_store = ParamStore::new();
            let tau_pid = design_store.add(Tensor::scalar(tau), false);
            let mut g = Graph::new();
            let a = g.constant(Tensor::from_vec(&[PAD_SIZE, PAD_SIZE], padded.data().to_vec()));
            let tau_node = g.param(&design_store, tau_pid);
            let batch = self.forward_design(&mut g, &[(a, tau_node)], self.cfg.temperature, false)?;
            let cbar_node = batch.cbars[0];
            let norm_node = g.frobenius_norm(cbar_node);

            let norm = g.value(norm_node).item();
            design_store.zero_grads();
            g.backward(norm_node, &mut design_store);
            let dnorm_dtau = design_store.grad(tau_pid).item();

            let cbar_vals = g.value(cbar_node).data().to_vec();
            let cbar = MandelMatrix::from_mat_symmetrized(Mat::from_vec(3, 3, cbar_vals));

            let (oracle_phi, oracle_cbar) = if let Some(cfg) = oracle {
                let f = range_normalize(&field(
                    &MicroSpec::new(grid, tau, self.cfg.temperature)?,
                    self.cfg.resolution,
                    self.cfg.resolution,
                )?);
                let img = crate::microgen::threshold_hard(&f, tau)?;
                match crate::fftsolver::homogenize(&img, (&self.phases.0, &self.phases.1), cfg) {
                    Ok(res) => {
                        let fac = self.factor_for_c0(img.c0())?;
                        let phi = crate::specnorm::phi_between(&res.cbar, &cbar, &fac)?;
                        (Some(phi), Some(res.cbar))
                    }
                    Err(_) => (None, None),
                }
            } else {
                (None, None)
            };
            rows.push(TauSensRow {
                tau,
                c0: batch.c0_values[0],
                norm,
                dnorm_dtau,
                cbar,
                oracle_phi,
                oracle_cbar,
            });
        }
        Ok(rows)
    }
}

/// Local maxima of |gradient| above `multiple` times the median magnitude.
pub fn spike_rows(grads: &[f64], multiple: f64) -> Vec<usize> {
    let mags: Vec<f64> = grads.iter().map(|g| g.abs()).collect();
    let mut sorted = mags.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    let thresh = multiple * median.max(f64::MIN_POSITIVE);
    let mut out = Vec::new();
    for i in 0..mags.len() {
        let left = if i > 0 { mags[i - 1] } else { f64::NEG_INFINITY };
        let right = if i + 1 < mags.len() { mags[i + 1] } else { f64::NEG_INFINITY };
        if mags[i] > thresh && mags[i] >= left && mags[i] >= right {
            out.push(i);
        }
    }
    // plateaus would double-report: keep the first of adjacent indices
    out.dedup_by(|a, b| *a == *b + 1);
    out
}

pub struct DesignBatch {
    pub xi: NodeId,
    pub cbars: Vec<NodeId>,
    pub ytildes: Vec<NodeId>,
    pub c0_values: Vec<f64>,
    pub chis: Vec<NodeId>,
}

pub enum ForwardInput<'a> {
    Spec(&'a MicroSpec),
    Image { img: &'a MicroImage, tau: Option<f64> },
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub xi: [f64; 6],
    pub cbar: MandelMatrix,
    pub ytilde: NormalizedTensor,
    pub c0: f64,
    pub tau_aux: f64,
    pub tau_from_c0: bool,
    pub envelope_ok: bool,
}

#[derive(Debug, Clone)]
pub struct TauSensRow {
    pub tau: f64,
    pub c0: f64,
    pub norm: f64,
    pub dnorm_dtau: f64,
    pub cbar: MandelMatrix,
    pub oracle_phi: Option<f64>,
    pub oracle_cbar: Option<MandelMatrix>,
}

//! MiniICL: a small transformer over rows that predicts query labels from
//! labeled support rows in a single forward pass.
//!
//! Rows are embedded linearly; support rows add a label embedding, query rows
//! add a learned "unknown label" vector. Attention uses the split mask, so a
//! query row never sees another query row and support rows never see queries.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::lora::{self, LoraConfig, LoraTarget};
use super::{check_width, Batch, ContextState, Model, ModelError, ModelFamily};
use crate::dataset::FeatureMatrix;
use crate::rng::{self, Rng};
use crate::tensor::{softmax_into, AttentionMask, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiniIclConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub k_max: usize,
    pub mlp_hidden: usize,
    pub softmax_temperature: f64,
    /// Query rows per forward pass at prediction time. Query rows are
    /// independent, so chunking does not change results.
    pub predict_chunk: usize,
}

impl Default for MiniIclConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            k_max: 10,
            mlp_hidden: 64,
            softmax_temperature: 0.9,
            predict_chunk: 256,
        }
    }
}

const LN_EPS: f64 = 1e-5;
const PROJECTIONS: [&str; 4] = ["q", "k", "v", "o"];

#[derive(Debug, Clone)]
pub struct MiniIcl {
    cfg: MiniIclConfig,
    n_features: usize,
    params: ParamStore,
    context: Option<ContextState>,
    lora: Option<LoraConfig>,
}

fn layer(l: usize, name: &str) -> String {
    format!("layer{l}.{name}")
}

impl MiniIcl {
    pub fn new(cfg: MiniIclConfig, n_features: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "init");
        let (d, h) = (cfg.d_model, cfg.mlp_hidden);
        let mut params = ParamStore::new();
        let mut gaussian = |rows: usize, cols: usize, var: f64| {
            let normal = Normal::new(0.0, var.sqrt()).expect("positive variance");
            Tensor::matrix(rows, cols, (0..rows * cols).map(|_| normal.sample(&mut rng)).collect())
        };
        params.insert("embed.w", gaussian(d, n_features, 1.0 / n_features.max(1) as f64), true);
        params.insert("embed.b", Tensor::zeros(&[d]), true);
        params.insert("label_emb", gaussian(cfg.k_max + 1, d, 1.0), true);
        for l in 0..cfg.n_layers {
            for p in PROJECTIONS {
                params.insert(layer(l, &format!("attn.{p}")), gaussian(d, d, 1.0 / d as f64), true);
            }
            params.insert(layer(l, "ln1.gamma"), Tensor::filled(&[d], 1.0), true);
            params.insert(layer(l, "ln1.beta"), Tensor::zeros(&[d]), true);
            params.insert(layer(l, "mlp.w1"), gaussian(h, d, 2.0 / d as f64), true);
            params.insert(layer(l, "mlp.b1"), Tensor::zeros(&[h]), true);
            params.insert(layer(l, "mlp.w2"), gaussian(d, h, 1.0 / h as f64), true);
            params.insert(layer(l, "mlp.b2"), Tensor::zeros(&[d]), true);
            params.insert(layer(l, "ln2.gamma"), Tensor::filled(&[d], 1.0), true);
            params.insert(layer(l, "ln2.beta"), Tensor::zeros(&[d]), true);
        }
        params.insert("head.w", gaussian(cfg.k_max, d, 1.0 / d as f64), true);
        params.insert("head.b", Tensor::zeros(&[cfg.k_max]), true);
        Self { cfg, n_features, params, context: None, lora: None }
    }

    pub fn config(&self) -> &MiniIclConfig {
        &self.cfg
    }

    /// Scalar count of the base architecture (no adapters).
    pub fn base_param_count(cfg: &MiniIclConfig, n_features: usize) -> usize {
        let (d, h, k) = (cfg.d_model, cfg.mlp_hidden, cfg.k_max);
        let per_layer = 4 * d * d + 4 * d + 2 * h * d + h + d;
        d * n_features + d + (k + 1) * d + cfg.n_layers * per_layer + k * d + k
    }

    /// Query logits (`n_query × k_max`, slots `>= n_classes` left unmasked)
    /// recorded on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        support_x: &FeatureMatrix,
        support_y: &[usize],
        query_x: &FeatureMatrix,
        n_classes: usize,
        mut train_rng: Option<&mut Rng>,
    ) -> Result<Var, ModelError> {
        if n_classes > self.cfg.k_max {
            return Err(ModelError::TooManyClasses { k: n_classes, k_max: self.cfg.k_max });
        }
        if support_x.rows == 0 || support_y.is_empty() {
            return Err(ModelError::EmptySupport);
        }
        check_width(support_x, self.n_features)?;
        check_width(query_x, self.n_features)?;
        if support_y.len() != support_x.rows {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "minicl",
                detail: format!("{} support rows vs {} labels", support_x.rows, support_y.len()),
            }
            .into());
        }
        if let Some(&label) = support_y.iter().find(|&&l| l >= n_classes) {
            return Err(ModelError::LabelOutOfRange { label, n_classes });
        }
        let (n_s, n_q) = (support_x.rows, query_x.rows);
        let n = n_s + n_q;
        let mut rows = Vec::with_capacity(n * self.n_features);
        rows.extend_from_slice(&support_x.data);
        rows.extend_from_slice(&query_x.data);
        let x = tape.constant(Tensor::matrix(n, self.n_features, rows));

        let p = &self.params;
        let w = tape.param(p, "embed.w")?;
        let b = tape.param(p, "embed.b")?;
        let mut h = tape.matmul_nt(x, w)?;
        h = tape.add_row(h, b)?;
        let labels: Vec<usize> = support_y.iter().copied().chain(std::iter::repeat_n(self.cfg.k_max, n_q)).collect();
        let table = tape.param(p, "label_emb")?;
        let lab = tape.embedding(table, &labels)?;
        h = tape.add(h, lab)?;

        let mask = AttentionMask::split(n_s, n_q);
        let lora = self.lora.as_ref();
        for l in 0..self.cfg.n_layers {
            let proj = |tape: &mut Tape, input: Var, name: &str, rng: Option<&mut Rng>| {
                lora::linear(tape, p, input, &layer(l, &format!("attn.{name}")), lora, rng)
            };
            let q = proj(tape, h, "q", train_rng.as_deref_mut())?;
            let k = proj(tape, h, "k", train_rng.as_deref_mut())?;
            let v = proj(tape, h, "v", train_rng.as_deref_mut())?;
            let a = tape.attention(q, k, v, &mask, self.cfg.n_heads)?;
            let o = proj(tape, a, "o", train_rng.as_deref_mut())?;
            h = tape.add(h, o)?;
            h = self.norm(tape, h, l, "ln1")?;

            let w1 = tape.param(p, &layer(l, "mlp.w1"))?;
            let b1 = tape.param(p, &layer(l, "mlp.b1"))?;
            let w2 = tape.param(p, &layer(l, "mlp.w2"))?;
            let b2 = tape.param(p, &layer(l, "mlp.b2"))?;
            let mut m = tape.matmul_nt(h, w1)?;
            m = tape.add_row(m, b1)?;
            m = tape.relu(m)?;
            m = tape.matmul_nt(m, w2)?;
            m = tape.add_row(m, b2)?;
            h = tape.add(h, m)?;
            h = self.norm(tape, h, l, "ln2")?;
        }

        let hq = tape.slice_rows(h, n_s, n_q)?;
        let hw = tape.param(p, "head.w")?;
        let hb = tape.param(p, "head.b")?;
        let logits = tape.matmul_nt(hq, hw)?;
        Ok(tape.add_row(logits, hb)?)
    }

    fn norm(&self, tape: &mut Tape, h: Var, l: usize, which: &str) -> Result<Var, ModelError> {
        let g = tape.param(&self.params, &layer(l, &format!("{which}.gamma")))?;
        let b = tape.param(&self.params, &layer(l, &format!("{which}.beta")))?;
        let n = tape.layer_norm(h, LN_EPS)?;
        let n = tape.mul_row(n, g)?;
        Ok(tape.add_row(n, b)?)
    }

    /// Raw query logits restricted to the first `n_classes` slots.
    pub fn query_logits(
        &self,
        support_x: &FeatureMatrix,
        support_y: &[usize],
        query_x: &FeatureMatrix,
        n_classes: usize,
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, support_x, support_y, query_x, n_classes, None)?;
        let t = tape.value(out);
        Ok((0..t.rows()).map(|i| t.row(i)[..n_classes].to_vec()).collect())
    }
}

impl Model for MiniIcl {
    fn name(&self) -> &str {
        "minicl"
    }

    fn family(&self) -> ModelFamily {
        ModelFamily::InContext
    }

    fn n_features(&self) -> usize {
        self.n_features
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn context(&self) -> Option<&ContextState> {
        self.context.as_ref()
    }

    fn set_context(&mut self, ctx: ContextState) -> Result<(), ModelError> {
        if ctx.n_classes > self.cfg.k_max {
            return Err(ModelError::TooManyClasses { k: ctx.n_classes, k_max: self.cfg.k_max });
        }
        if ctx.x.rows == 0 {
            return Err(ModelError::EmptySupport);
        }
        check_width(&ctx.x, self.n_features)?;
        self.context = Some(ctx);
        Ok(())
    }

    fn loss(&self, tape: &mut Tape, batch: Batch<'_>, train_rng: Option<&mut Rng>) -> Result<Var, ModelError> {
        let Batch::Episode { support_x, support_y, query_x, query_y, n_classes } = batch else {
            return Err(ModelError::UnsupportedBatch { model: "minicl", batch: "supervised" });
        };
        let logits = self.forward(tape, support_x, support_y, query_x, n_classes, train_rng)?;
        Ok(tape.cross_entropy(logits, query_y, n_classes)?)
    }

    fn predict_proba(&self, x: &FeatureMatrix) -> Result<Vec<Vec<f64>>, ModelError> {
        let ctx = self.context.as_ref().ok_or(ModelError::NotFitted)?;
        check_width(x, self.n_features)?;
        let k = ctx.n_classes;
        let t = self.cfg.softmax_temperature;
        let mut out = Vec::with_capacity(x.rows);
        let idx: Vec<usize> = (0..x.rows).collect();
        for chunk in idx.chunks(self.cfg.predict_chunk.max(1)) {
            let q = x.select_rows(chunk);
            for logits in self.query_logits(&ctx.x, &ctx.y, &q, k)? {
                let scaled: Vec<f64> = logits.iter().map(|v| v / t).collect();
                let mut p = vec![0.0; k];
                softmax_into(&scaled, &mut p);
                out.push(p);
            }
        }
        Ok(out)
    }

    fn lora_targets(&self) -> Vec<LoraTarget> {
        let d = self.cfg.d_model;
        (0..self.cfg.n_layers)
            .flat_map(|l| {
                PROJECTIONS.iter().map(move |p| LoraTarget { weight: layer(l, &format!("attn.{p}")), n_out: d, n_in: d })
            })
            .collect()
    }

    fn head_params(&self) -> Vec<String> {
        vec!["head.b".into(), "head.w".into()]
    }

    fn lora(&self) -> Option<LoraConfig> {
        self.lora
    }

    fn set_lora(&mut self, cfg: Option<LoraConfig>) {
        self.lora = cfg;
    }

    fn clone_box(&self) -> Box<dyn Model> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::attach_lora;
    use rand::Rng as _;

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> FeatureMatrix {
        FeatureMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect())
    }

    #[test]
    fn param_count_matches_closed_form() {
        for d_in in [1, 2, 7] {
            let m = MiniIcl::new(MiniIclConfig::default(), d_in, 0);
            assert_eq!(m.params().n_params(), MiniIcl::base_param_count(m.config(), d_in));
        }
    }

    #[test]
    fn query_rows_do_not_interact() {
        let m = MiniIcl::new(MiniIclConfig::default(), 3, 1);
        let mut rng = crate::rng::from_seed(9);
        let sx = random_matrix(&mut rng, 6, 3);
        let sy = vec![0, 1, 2, 0, 1, 2];
        let qx = random_matrix(&mut rng, 4, 3);
        let base = m.query_logits(&sx, &sy, &qx, 3).unwrap();

        let mut perturbed = qx.clone();
        perturbed.data[3..6].copy_from_slice(&[9.0, -9.0, 4.0]);
        let out = m.query_logits(&sx, &sy, &perturbed, 3).unwrap();
        for i in [0, 2, 3] {
            assert_eq!(base[i], out[i]);
        }
        assert_ne!(base[1], out[1]);

        let perm = [3, 1, 0, 2];
        let permuted = m.query_logits(&sx, &sy, &qx.select_rows(&perm), 3).unwrap();
        for (pos, &src) in perm.iter().enumerate() {
            assert_eq!(permuted[pos], base[src]);
        }
    }

    #[test]
    fn class_limit_and_empty_support() {
        let m = MiniIcl::new(MiniIclConfig::default(), 2, 0);
        let x = FeatureMatrix::zeros(2, 2);
        assert_eq!(m.query_logits(&x, &[0, 1], &x, 11), Err(ModelError::TooManyClasses { k: 11, k_max: 10 }));
        assert_eq!(m.query_logits(&FeatureMatrix::zeros(0, 2), &[], &x, 2), Err(ModelError::EmptySupport));
    }

    #[test]
    fn predictions_stay_below_class_count() {
        let mut m = MiniIcl::new(MiniIclConfig::default(), 2, 4);
        let mut rng = crate::rng::from_seed(4);
        let x = random_matrix(&mut rng, 12, 2);
        let y: Vec<usize> = (0..12).map(|i| i % 3).collect();
        m.set_context(ContextState::new(x.clone(), y, 3).unwrap()).unwrap();
        for row in m.predict_proba(&x).unwrap() {
            assert_eq!(row.len(), 3);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lora_attach_is_identity_and_zero_up_restores_base() {
        let base = MiniIcl::new(MiniIclConfig::default(), 2, 5);
        let mut rng = crate::rng::from_seed(5);
        let sx = random_matrix(&mut rng, 5, 2);
        let sy = vec![0, 1, 0, 1, 1];
        let qx = random_matrix(&mut rng, 3, 2);
        let before = base.query_logits(&sx, &sy, &qx, 2).unwrap();

        let mut adapted = base.clone();
        let report = attach_lora(&mut adapted, &LoraConfig::default(), 7).unwrap();
        assert_eq!(adapted.query_logits(&sx, &sy, &qx, 2).unwrap(), before);
        assert_eq!(report.trainable_params, 8 * 8 * 64 + 10 * 32 + 10);

        for t in adapted.lora_targets() {
            let up = t.up_name();
            let shape = adapted.params().value(&up).unwrap().shape().to_vec();
            adapted.params_mut().set_value(&up, Tensor::filled(&shape, 0.3)).unwrap();
        }
        assert_ne!(adapted.query_logits(&sx, &sy, &qx, 2).unwrap(), before);
        for t in adapted.lora_targets() {
            let up = t.up_name();
            let shape = adapted.params().value(&up).unwrap().shape().to_vec();
            adapted.params_mut().set_value(&up, Tensor::zeros(&shape)).unwrap();
        }
        assert_eq!(adapted.query_logits(&sx, &sy, &qx, 2).unwrap(), before);
    }
}

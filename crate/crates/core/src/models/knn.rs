//! k-nearest-neighbor classifier with neighbor-frequency probabilities.
//!
//! Distance ties go to the lower training index, so predictions are a pure
//! function of row order.

use super::{check_width, Batch, ContextState, Model, ModelError, ModelFamily};
use crate::dataset::FeatureMatrix;
use crate::rng::Rng;
use crate::tensor::{ParamStore, Tape, Var};

#[derive(Debug, Clone)]
pub struct Knn {
    k: usize,
    n_features: usize,
    params: ParamStore,
    context: Option<ContextState>,
}

impl Knn {
    pub fn new(k: usize, n_features: usize) -> Self {
        Self { k: k.max(1), n_features, params: ParamStore::new(), context: None }
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Model for Knn {
    fn name(&self) -> &str {
        "knn"
    }

    fn family(&self) -> ModelFamily {
        ModelFamily::Instance
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
        if ctx.x.rows == 0 {
            return Err(ModelError::EmptyTrainingSet);
        }
        check_width(&ctx.x, self.n_features)?;
        self.context = Some(ctx);
        Ok(())
    }

    fn loss(&self, _tape: &mut Tape, _batch: Batch<'_>, _train_rng: Option<&mut Rng>) -> Result<Var, ModelError> {
        Err(ModelError::UnsupportedBatch { model: "knn", batch: "gradient" })
    }

    fn predict_proba(&self, x: &FeatureMatrix) -> Result<Vec<Vec<f64>>, ModelError> {
        let ctx = self.context.as_ref().ok_or(ModelError::NotFitted)?;
        check_width(x, self.n_features)?;
        let k = self.k.min(ctx.x.rows);
        let mut out = Vec::with_capacity(x.rows);
        let mut order: Vec<(f64, usize)> = Vec::with_capacity(ctx.x.rows);
        for i in 0..x.rows {
            order.clear();
            order.extend((0..ctx.x.rows).map(|j| (sq_dist(x.row(i), ctx.x.row(j)), j)));
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut p = vec![0.0; ctx.n_classes];
            for &(_, j) in &order[..k] {
                p[ctx.y[j]] += 1.0;
            }
            for v in &mut p {
                *v /= k as f64;
            }
            out.push(p);
        }
        Ok(out)
    }

    fn clone_box(&self) -> Box<dyn Model> {
        Box::new(self.clone())
    }
}

//! Multinomial logistic regression, trained through the same supervised loop
//! as every other model (full-batch AdamW by default).

use super::{check_width, Batch, ContextState, Model, ModelError, ModelFamily};
use crate::dataset::FeatureMatrix;
use crate::rng::Rng;
use crate::tensor::{softmax_into, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Logistic {
    n_features: usize,
    n_classes: usize,
    params: ParamStore,
}

impl Logistic {
    /// Zero-initialized weights; the optimum is unique up to the loss surface,
    /// so no random start is needed.
    pub fn new(n_features: usize, n_classes: usize) -> Self {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::zeros(&[n_classes, n_features]), true);
        params.insert("b", Tensor::zeros(&[n_classes]), true);
        Self { n_features, n_classes, params }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn logits(&self, tape: &mut Tape, x: &FeatureMatrix) -> Result<Var, ModelError> {
        check_width(x, self.n_features)?;
        let xv = tape.constant(Tensor::matrix(x.rows, x.cols, x.data.clone()));
        let w = tape.param(&self.params, "w")?;
        let b = tape.param(&self.params, "b")?;
        let z = tape.matmul_nt(xv, w)?;
        Ok(tape.add_row(z, b)?)
    }
}

impl Model for Logistic {
    fn name(&self) -> &str {
        "logistic"
    }

    fn family(&self) -> ModelFamily {
        ModelFamily::Parametric
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
        None
    }

    fn set_context(&mut self, _ctx: ContextState) -> Result<(), ModelError> {
        Ok(())
    }

    fn loss(&self, tape: &mut Tape, batch: Batch<'_>, _train_rng: Option<&mut Rng>) -> Result<Var, ModelError> {
        let Batch::Supervised { x, y } = batch else {
            return Err(ModelError::UnsupportedBatch { model: "logistic", batch: "episode" });
        };
        if x.rows == 0 {
            return Err(ModelError::EmptyTrainingSet);
        }
        let z = self.logits(tape, x)?;
        Ok(tape.cross_entropy(z, y, self.n_classes)?)
    }

    fn predict_proba(&self, x: &FeatureMatrix) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut tape = Tape::new();
        let z = self.logits(&mut tape, x)?;
        let t = tape.value(z);
        Ok((0..t.rows())
            .map(|i| {
                let mut p = vec![0.0; self.n_classes];
                softmax_into(t.row(i), &mut p);
                p
            })
            .collect())
    }

    fn clone_box(&self) -> Box<dyn Model> {
        Box::new(self.clone())
    }
}

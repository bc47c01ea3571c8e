use serde::{Deserialize, Serialize};

use crate::btt::{BlockTTLayer, DesignCorner, SPlacement, TrainableSide};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, DenseMatrix};

/// Closed-form one-step `ΔW_k` for each parameter-efficient corner, written
/// with the block SVD `W_k = U_k diag(S_k) V_kᵀ` and `G_k = ∂ℒ/∂W_k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreconditionerForm {
    /// Train `L` with `S` inside it: `−η G_k V_k V_kᵀ`.
    OutputProjector,
    /// Train `L`, `S` inside frozen `R`: `−η G_k V_k diag(S_k)² V_kᵀ`.
    OutputWeighted,
    /// Train `R` with `S` inside it: `−η U_k U_kᵀ G_k`.
    InputProjector,
    /// Train `R`, `S` inside frozen `L`: `−η U_k diag(S_k)² U_kᵀ G_k`.
    InputWeighted,
    /// Train `R` and `S`: `−η U_k diag(S_k)² U_kᵀ G_k + U_k diag(ΔS_k) V_kᵀ`.
    InputDefault,
    /// Train `L` and `S`: `−η G_k V_k diag(S_k)² V_kᵀ + U_k diag(ΔS_k) V_kᵀ`.
    OutputDefault,
}

impl PreconditionerForm {
    pub const ALL: [PreconditionerForm; 6] = [
        PreconditionerForm::OutputProjector,
        PreconditionerForm::OutputWeighted,
        PreconditionerForm::InputProjector,
        PreconditionerForm::InputWeighted,
        PreconditionerForm::InputDefault,
        PreconditionerForm::OutputDefault,
    ];

    pub fn for_corner(corner: DesignCorner) -> Result<Self> {
        use PreconditionerForm::*;
        use SPlacement::*;
        use TrainableSide::*;
        match (corner.side, corner.placement) {
            (Output, MergedToTrainable) => Ok(OutputProjector),
            (Output, MergedToFrozen) => Ok(OutputWeighted),
            (Input, MergedToTrainable) => Ok(InputProjector),
            (Input, MergedToFrozen) => Ok(InputWeighted),
            (Input, Separate) => Ok(InputDefault),
            (Output, Separate) => Ok(OutputDefault),
            (All, _) => Err(Error::Contract("the fully trainable layer has no closed-form preconditioner".into())),
        }
    }

    pub fn corner(self) -> DesignCorner {
        use PreconditionerForm::*;
        let (side, placement) = match self {
            OutputProjector => (TrainableSide::Output, SPlacement::MergedToTrainable),
            OutputWeighted => (TrainableSide::Output, SPlacement::MergedToFrozen),
            InputProjector => (TrainableSide::Input, SPlacement::MergedToTrainable),
            InputWeighted => (TrainableSide::Input, SPlacement::MergedToFrozen),
            InputDefault => (TrainableSide::Input, SPlacement::Separate),
            OutputDefault => (TrainableSide::Output, SPlacement::Separate),
        };
        DesignCorner { side, placement }
    }

    /// Exactly one core moves, so the closed form has no higher-order term.
    pub fn is_single_core(self) -> bool {
        !matches!(self, PreconditionerForm::InputDefault | PreconditionerForm::OutputDefault)
    }

    pub fn formula(self) -> &'static str {
        use PreconditionerForm::*;
        match self {
            OutputProjector => "-eta G_k V_k V_k^T",
            OutputWeighted => "-eta G_k V_k diag(S_k)^2 V_k^T",
            InputProjector => "-eta U_k U_k^T G_k",
            InputWeighted => "-eta U_k diag(S_k)^2 U_k^T G_k",
            InputDefault => "-eta U_k diag(S_k)^2 U_k^T G_k + U_k diag(dS_k) V_k^T",
            OutputDefault => "-eta G_k V_k diag(S_k)^2 V_k^T + U_k diag(dS_k) V_k^T",
        }
    }
}

/// Predicted `ΔW` for one sample `(x, g)`.
pub fn predicted_update(
    layer: &BlockTTLayer,
    x: &[f64],
    g: &[f64],
    eta: f64,
    form: PreconditionerForm,
) -> Result<DenseMatrix> {
    if x.len() != layer.d_in() || g.len() != layer.d_out() {
        return Err(Error::dim("predicted_update vector lengths"));
    }
    predicted_update_dense(layer, &DenseMatrix::outer(g, x), eta, form)
}

/// Predicted `ΔW` from a dense weight gradient, evaluated block by block on
/// the factors `U_k`, `S_k`, `V_kᵀ` recovered from the layer's cores.
pub fn predicted_update_dense(
    layer: &BlockTTLayer,
    weight_grad: &DenseMatrix,
    eta: f64,
    form: PreconditionerForm,
) -> Result<DenseMatrix> {
    if form.corner() != layer.corner() {
        return Err(Error::Contract(format!(
            "form {form:?} belongs to corner {}, layer is {}",
            form.corner(),
            layer.corner()
        )));
    }
    if weight_grad.shape() != (layer.d_out(), layer.d_in()) {
        return Err(Error::dim("weight gradient shape does not match the layer"));
    }
    use PreconditionerForm::*;
    let mut out = DenseMatrix::zeros(layer.d_out(), layer.d_in());
    for k in 0..layer.n_blocks() {
        let gk = layer.block_of(weight_grad, k);
        let l = &layer.l_blocks()[k];
        let r = &layer.r_blocks()[k];
        let dw = match form {
            InputProjector => l.matmul(&l.t_matmul(&gk)?)?.scale(-eta),
            InputWeighted => {
                let (u, s) = split_scaled_columns(l);
                let sq: Vec<f64> = s.iter().map(|v| v * v).collect();
                u.scale_cols(&sq).matmul(&u.t_matmul(&gk)?)?.scale(-eta)
            }
            OutputProjector => gk.matmul_t(r)?.matmul(r)?.scale(-eta),
            OutputWeighted => {
                let (s, vt) = split_scaled_rows(r);
                let sq: Vec<f64> = s.iter().map(|v| v * v).collect();
                gk.matmul_t(&vt)?.scale_cols(&sq).matmul(&vt)?.scale(-eta)
            }
            InputDefault | OutputDefault => {
                let s = &layer.s_blocks().expect("separate corner has S")[k];
                let sq: Vec<f64> = s.iter().map(|v| v * v).collect();
                let first = if form == InputDefault {
                    l.scale_cols(&sq).matmul(&l.t_matmul(&gk)?)?
                } else {
                    gk.matmul_t(r)?.scale_cols(&sq).matmul(r)?
                };
                let ut_g = l.t_matmul(&gk)?;
                let delta_s: Vec<f64> = (0..layer.rank()).map(|i| -eta * dot(ut_g.row(i), r.row(i))).collect();
                let mut dw = first.scale(-eta);
                dw.axpy(1.0, &l.scale_cols(&delta_s).matmul(r)?)?;
                dw
            }
        };
        layer.place_block(&mut out, k, &dw);
    }
    Ok(out)
}

/// `L = U diag(S)` with orthogonal columns → `(U, S)`; zero columns stay zero.
fn split_scaled_columns(l: &DenseMatrix) -> (DenseMatrix, Vec<f64>) {
    let s: Vec<f64> = (0..l.cols()).map(|j| norm2(&l.col(j))).collect();
    let inv: Vec<f64> = s.iter().map(|&v| if v > 0.0 { 1.0 / v } else { 0.0 }).collect();
    (l.scale_cols(&inv), s)
}

/// `R = diag(S) Vᵀ` with orthogonal rows → `(S, Vᵀ)`.
fn split_scaled_rows(r: &DenseMatrix) -> (Vec<f64>, DenseMatrix) {
    let s: Vec<f64> = (0..r.rows()).map(|i| norm2(r.row(i))).collect();
    let inv: Vec<f64> = s.iter().map(|&v| if v > 0.0 { 1.0 / v } else { 0.0 }).collect();
    (s, r.scale_rows(&inv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::btt::BlockShape;
    use crate::grad::{backward, effective_update};
    use crate::linalg::{gaussian, SeededRng};

    #[test]
    fn forms_are_one_to_one_with_corners() {
        for form in PreconditionerForm::ALL {
            assert_eq!(PreconditionerForm::for_corner(form.corner()).unwrap(), form);
        }
        assert!(PreconditionerForm::for_corner(DesignCorner::FULL).is_err());
    }

    #[test]
    fn mismatched_form_is_rejected() {
        let layer =
            BlockTTLayer::block_svd_init(&DenseMatrix::identity(4), BlockShape::column(2, 2), DesignCorner::DEFAULT)
                .unwrap();
        let err = predicted_update(&layer, &[1.0; 4], &[1.0; 4], 0.1, PreconditionerForm::InputWeighted);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn zero_gradient_predicts_zero() {
        let layer =
            BlockTTLayer::block_svd_init(&gaussian(4, 4, 2, 1.0), BlockShape::column(2, 2), DesignCorner::DEFAULT)
                .unwrap();
        let p = predicted_update(&layer, &[1.0; 4], &[0.0; 4], 0.1, PreconditionerForm::InputDefault).unwrap();
        assert_eq!(p.max_abs(), 0.0);
    }

    #[test]
    fn single_core_forms_match_one_step() {
        let w = gaussian(6, 6, 11, 1.0);
        let mut rng = SeededRng::new(12);
        for form in PreconditionerForm::ALL.into_iter().filter(|f| f.is_single_core()) {
            let corner = form.corner();
            let shape = BlockShape { n: 3, b: 2, orientation: corner.natural_orientation() };
            let layer = BlockTTLayer::block_svd_init(&w, shape, corner).unwrap();
            let (x, g) = (rng.normal_vec(6, 1.0), rng.normal_vec(6, 1.0));
            let bundle = backward(&layer, &x, &g).unwrap();
            let eff = effective_update(&layer, &bundle, 0.05).unwrap();
            let pred = predicted_update(&layer, &x, &g, 0.05, form).unwrap();
            assert!(eff.sub(&pred).unwrap().max_abs() < 1e-12, "{form:?}");
        }
    }
}

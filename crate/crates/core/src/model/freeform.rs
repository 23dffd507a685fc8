//! Identity parameterization: the displacement field is the parameter vector.

use super::adam::AdamState;
use crate::error::Result;
use crate::volume::Grid;
use crate::warp::DisplacementField;

#[derive(Debug, Clone, PartialEq)]
pub struct FreeFormModel {
    pub field: DisplacementField,
}

impl FreeFormModel {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            field: DisplacementField::zeros(grid),
        }
    }

    pub fn from_field(field: DisplacementField) -> Self {
        Self { field }
    }

    pub fn num_parameters(&self) -> usize {
        3 * self.field.len()
    }

    /// The field the model represents.
    pub fn apply(&self) -> &DisplacementField {
        &self.field
    }

    /// Parameter gradient for a loss gradient with respect to the field.
    pub fn parameter_gradient(grad_field: &DisplacementField) -> &[f64] {
        grad_field.as_flat()
    }

    pub fn adam_step(&mut self, grad_field: &DisplacementField, state: &mut AdamState) -> Result<()> {
        state.step(&mut [self.field.as_flat_mut()], &[grad_field.as_flat()])
    }
}

/// Free-form prediction: the parameters themselves.
pub fn freeform_apply(model: &FreeFormModel) -> DisplacementField {
    model.field.clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_parameterization() {
        let g = Grid::new([3, 4, 5], [1.0; 3]).unwrap();
        let m = FreeFormModel::zeros(g);
        assert_eq!(m.num_parameters(), 3 * 60);
        assert!(freeform_apply(&m).as_flat().iter().all(|&v| v == 0.0));

        let m = FreeFormModel::from_field(DisplacementField::constant(g, [1.0, 2.0, 3.0]));
        assert!(freeform_apply(&m).data().iter().all(|u| *u == [1.0, 2.0, 3.0]));

        let grad = DisplacementField::constant(g, [0.25, -1.5, 7.0]);
        let pg = FreeFormModel::parameter_gradient(&grad);
        assert_eq!(pg, grad.as_flat());
    }
}

//! Affine forward map `F(m) = G m + f`, used for quadratic test problems.

use nalgebra::{DMatrix, DVector};

use super::{ForwardModel, ParameterField};
use crate::error::{dimension, Result};
use crate::fem::Mesh1d;

#[derive(Debug, Clone)]
pub struct LinearModel {
    mesh: Mesh1d,
    matrix: DMatrix<f64>,
    offset: Vec<f64>,
}

impl LinearModel {
    pub fn new(mesh: Mesh1d, matrix: DMatrix<f64>, offset: Vec<f64>) -> Result<Self> {
        if matrix.ncols() != 2 * mesh.n_nodes() || matrix.nrows() != offset.len() {
            return Err(dimension(format!(
                "{}×{} forward matrix with offset of length {} on {} nodes",
                matrix.nrows(),
                matrix.ncols(),
                offset.len(),
                mesh.n_nodes()
            )));
        }
        Ok(Self { mesh, matrix, offset })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl ForwardModel for LinearModel {
    type State = Vec<f64>;

    fn mesh(&self) -> &Mesh1d {
        &self.mesh
    }

    fn n_obs(&self) -> usize {
        self.offset.len()
    }

    fn solve(&self, m: &ParameterField) -> Result<Vec<f64>> {
        let f = &self.matrix * m.to_vector();
        Ok(f.iter().zip(&self.offset).map(|(a, b)| a + b).collect())
    }

    fn observables(&self, state: &Vec<f64>) -> Vec<f64> {
        state.clone()
    }

    fn jvp(&self, _m: &ParameterField, _state: &Vec<f64>, dm: &DVector<f64>) -> Result<Vec<f64>> {
        Ok((&self.matrix * dm).iter().copied().collect())
    }

    fn vjp(&self, _m: &ParameterField, _state: &Vec<f64>, w: &[f64]) -> Result<DVector<f64>> {
        Ok(self.matrix.tr_mul(&DVector::from_column_slice(w)))
    }

    fn vjp_derivative(
        &self,
        _m: &ParameterField,
        _state: &Vec<f64>,
        _w: &[f64],
        dm: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        Ok(DVector::zeros(dm.len()))
    }
}

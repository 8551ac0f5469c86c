//! Balancing regularizer over a representation matrix.
//!
//! Every representation column `i` acts in turn as a treatment: rows whose
//! indicator `B[., i]` is 1 form the treated group and the rest the control
//! group. The regularizer sums, over all columns, the squared distance
//! between the weighted treated and control means of the *other* columns:
//!
//! ```text
//! G = sum_i || Z[.,-i]^T (W o B[.,i]) / (W^T B[.,i] + eps)
//!            - Z[.,-i]^T (W o (1 - B[.,i])) / (W^T (1 - B[.,i]) + eps) ||^2
//! ```
//!
//! Two routes are provided. [`group_means`] and [`balance_loss_reference`]
//! evaluate the formula directly with loops; [`balance_loss`] builds the same
//! quantity on a [`Graph`] from matrix kernels so it can be differentiated
//! with respect to both the weights and the representation.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-8;

/// Borrowed inputs for one evaluation of the regularizer.
#[derive(Debug, Clone, Copy)]
pub struct BalanceInputs<'a> {
    /// `n x d` representations.
    pub z: &'a Tensor,
    /// `n x d` indicators.
    pub b: &'a Tensor,
    /// `n` sample weights.
    pub w: &'a [f64],
    pub eps: f64,
}

impl BalanceInputs<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.z.shape().len() != 2 || self.z.shape() != self.b.shape() {
            return Err(Error::Dimension {
                kernel: "balance",
                left: self.z.shape().to_vec(),
                right: self.b.shape().to_vec(),
            });
        }
        if self.w.len() != self.z.rows() {
            return Err(Error::Dimension {
                kernel: "balance",
                left: self.z.shape().to_vec(),
                right: vec![self.w.len()],
            });
        }
        if self.b.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract("indicator entries must be 0 or 1".into()));
        }
        if self.w.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Contract("sample weights must be non-negative".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Contract(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Weighted treated/control means of all columns except `feature`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMeans {
    pub treated: Vec<f64>,
    pub control: Vec<f64>,
}

/// Weighted group means for one treatment column.
///
/// `b_col` is usually column `feature` of the indicator matrix. It is not
/// required to be 0/1: gradient oracles pass a linearised indicator here.
/// With `eps = 0` an empty group yields a division by zero, which is
/// reported as a contract error.
pub fn group_means(z: &Tensor, b_col: &[f64], w: &[f64], feature: usize, eps: f64) -> Result<GroupMeans> {
    let (n, d) = (z.rows(), z.cols());
    if b_col.len() != n || w.len() != n || feature >= d {
        return Err(Error::Dimension {
            kernel: "group_means",
            left: z.shape().to_vec(),
            right: vec![b_col.len(), w.len(), feature],
        });
    }
    let mut den_t = 0.0;
    let mut den_c = 0.0;
    let mut num_t = vec![0.0; d - 1];
    let mut num_c = vec![0.0; d - 1];
    for r in 0..n {
        let wt = w[r] * b_col[r];
        let wc = w[r] * (1.0 - b_col[r]);
        den_t += wt;
        den_c += wc;
        let mut k = 0;
        for j in 0..d {
            if j == feature {
                continue;
            }
            let v = z.at(r, j);
            num_t[k] += v * wt;
            num_c[k] += v * wc;
            k += 1;
        }
    }
    den_t += eps;
    den_c += eps;
    if den_t == 0.0 || den_c == 0.0 {
        return Err(Error::Contract(format!(
            "feature {feature} has an empty group and eps = 0"
        )));
    }
    Ok(GroupMeans {
        treated: num_t.into_iter().map(|v| v / den_t).collect(),
        control: num_c.into_iter().map(|v| v / den_c).collect(),
    })
}

/// Direct evaluation of `G`. `b` may hold arbitrary reals (see
/// [`group_means`]); `eps` may be zero when every group is non-empty.
pub fn balance_loss_reference(z: &Tensor, b: &Tensor, w: &[f64], eps: f64) -> Result<f64> {
    let (n, d) = (z.rows(), z.cols());
    let mut total = 0.0;
    for i in 0..d {
        let col: Vec<f64> = (0..n).map(|r| b.at(r, i)).collect();
        let m = group_means(z, &col, w, i, eps)?;
        total += m
            .treated
            .iter()
            .zip(&m.control)
            .map(|(t, c)| (t - c) * (t - c))
            .sum::<f64>();
    }
    Ok(total)
}

/// Records `G` on `graph`.
///
/// `z` and `b` are `n x d`, `w` is `n x 1`. Gradients reach `w`, reach `z`
/// through the numerators, and reach `z` again through `b` when `b` was
/// produced by [`Graph::binarize`].
pub fn balance_loss(graph: &mut Graph, z: NodeId, b: NodeId, w: NodeId, eps: f64) -> Result<NodeId> {
    let zs = graph.value(z).shape().to_vec();
    let bs = graph.value(b).shape().to_vec();
    let ws = graph.value(w).shape().to_vec();
    if zs.len() != 2 || zs != bs || ws != [zs[0], 1] {
        return Err(Error::Dimension {
            kernel: "balance",
            left: zs,
            right: if bs.len() == 2 && bs == graph.value(z).shape() { ws } else { bs },
        });
    }
    let d = zs[1];

    let ones_row = graph.constant(Tensor::ones(vec![1, d]));
    let ones_col = graph.constant(Tensor::ones(vec![d, 1]));
    let one = graph.constant(Tensor::scalar(1.0));
    let eps_node = graph.constant(Tensor::scalar(eps));
    let mut off_diag = Tensor::ones(vec![d, d]);
    for i in 0..d {
        off_diag.data_mut()[i * d + i] = 0.0;
    }
    let off_diag = graph.constant(off_diag);

    // W spread across columns: [r, i] = w_r.
    let w_wide = graph.matmul(w, ones_row)?;
    let control = graph.sub(one, b)?;
    let wb = graph.mul(w_wide, b)?;
    let wc = graph.mul(w_wide, control)?;

    // Numerators: [j, i] = sum_r z[r, j] * w_r * b[r, i].
    let zt = graph.transpose(z)?;
    let num_t = graph.matmul(zt, wb)?;
    let num_c = graph.matmul(zt, wc)?;

    // Denominators as rows, then spread over d rows: [j, i] = den[i].
    let wt = graph.transpose(w)?;
    let den_t = graph.matmul(wt, b)?;
    let den_c = graph.matmul(wt, control)?;
    let den_t = graph.add(den_t, eps_node)?;
    let den_c = graph.add(den_c, eps_node)?;
    let den_t = graph.matmul(ones_col, den_t)?;
    let den_c = graph.matmul(ones_col, den_c)?;

    let mean_t = graph.div(num_t, den_t)?;
    let mean_c = graph.div(num_c, den_c)?;
    let diff = graph.sub(mean_t, mean_c)?;
    // Column i of `diff` holds feature i's imbalance over every column j; the
    // diagonal (j == i) is the treatment column itself and is excluded.
    let diff = graph.mul(diff, off_diag)?;
    let sq = graph.square(diff)?;
    graph.sum(sq)
}

/// Value of `G` for plain (non-graph) inputs using the graph route.
pub fn balance_value(inputs: &BalanceInputs<'_>) -> Result<f64> {
    inputs.validate()?;
    let mut graph = Graph::new();
    let z = graph.constant(inputs.z.clone());
    let b = graph.constant(inputs.b.clone());
    let w = graph.constant(Tensor::column(inputs.w.to_vec()));
    let g = balance_loss(&mut graph, z, b, w, inputs.eps)?;
    Ok(graph.value(g).item())
}

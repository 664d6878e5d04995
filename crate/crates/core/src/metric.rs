//! Relative l2 error, computed per component with the dx-weighted norm
//! ||u||_2 = sqrt(dx * sum_i u_i^2).

use crate::error::{NssdaError, Result};
use crate::scalar::Scalar;
use crate::state::FieldState;

/// R = ||u - u_true|| / ||u_true|| for every component.
pub fn relative_l2<T: Scalar>(
    u: &FieldState<T>,
    u_true: &FieldState<T>,
    dx: T,
) -> Result<Vec<T>> {
    if u.frame != u_true.frame || u.data.raw_dim() != u_true.data.raw_dim() {
        return Err(NssdaError::ShapeMismatch {
            op: "relative_l2",
            expected: format!("{:?} {:?}", u_true.frame, u_true.data.raw_dim()),
            got: format!("{:?} {:?}", u.frame, u.data.raw_dim()),
        });
    }
    (0..u.p())
        .map(|c| {
            let mut num = T::zero();
            let mut den = T::zero();
            for (a, b) in u.channel(c).iter().zip(u_true.channel(c).iter()) {
                num += (*a - *b) * (*a - *b);
                den += *b * *b;
            }
            if den == T::zero() {
                return Err(NssdaError::Numerical {
                    context: "relative_l2",
                    detail: format!("zero-norm truth in channel {c}"),
                });
            }
            Ok(((dx * num).sqrt()) / ((dx * den).sqrt()))
        })
        .collect()
}

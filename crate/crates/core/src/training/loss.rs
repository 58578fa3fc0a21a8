use super::TrainError;
use crate::model::kernels::log_sum_exp;
use crate::tensor::{Float, Tensor};
use crate::tokenizer::TokenId;

/// Next-token loss: `Σ mask·NLL / Σ mask`. Also returns every position's NLL
/// (masked or not).
pub fn masked_cross_entropy<T: Float>(
    logits: &Tensor<T>,
    targets: &[TokenId],
    mask: &[u8],
) -> Result<(T, Vec<T>), TrainError> {
    let n = logits.rows();
    if targets.len() != n || mask.len() != n {
        return Err(TrainError::Shape(format!(
            "{n} logit rows, {} targets, {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let kept: usize = mask.iter().map(|&m| m as usize).sum();
    if kept == 0 {
        return Err(TrainError::Domain("loss mask selects no tokens".into()));
    }
    let nll = token_nll(logits, targets);
    let total: T = nll.iter().zip(mask).filter(|(_, &m)| m != 0).map(|(&l, _)| l).sum();
    Ok((total / T::c(kept as f64), nll))
}

/// `-log softmax(logits_t)[target_t]` per row.
pub fn token_nll<T: Float>(logits: &Tensor<T>, targets: &[TokenId]) -> Vec<T> {
    targets
        .iter()
        .enumerate()
        .map(|(t, &y)| {
            let row = logits.row(t);
            log_sum_exp(row) - row[y as usize]
        })
        .collect()
}

/// Gradient of `Σ mask·NLL / denom` with respect to the logits, written in place
/// of the logits. Masked rows become exactly zero.
pub(crate) fn cross_entropy_grad_in_place<T: Float>(
    logits: &mut Tensor<T>,
    targets: &[TokenId],
    mask: &[u8],
    denom: T,
) {
    let inv = T::one() / denom;
    for (t, (&y, &m)) in targets.iter().zip(mask).enumerate() {
        let row = logits.row_mut(t);
        if m == 0 {
            row.iter_mut().for_each(|v| *v = T::zero());
            continue;
        }
        crate::model::kernels::softmax_in_place(row);
        row[y as usize] -= T::one();
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(rows: usize, v: usize) -> Tensor<f64> {
        Tensor::from_vec(
            &[rows, v],
            (0..rows * v)
                .map(|i| ((i * 13 % 17) as f64 * 0.41).sin() * 2.0)
                .collect(),
        )
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let l = Tensor::<f64>::zeros(&[4, 50]);
        let (loss, _) = masked_cross_entropy(&l, &[0, 1, 2, 3], &[1; 4]).unwrap();
        assert!((loss - 50f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn masking_equals_subset() {
        let l = logits(8, 11);
        let targets = [1, 5, 3, 0, 10, 2, 7, 4];
        let mask = [1, 0, 1, 0, 1, 0, 1, 0];
        let (loss, _) = masked_cross_entropy(&l, &targets, &mask).unwrap();

        let keep: Vec<usize> = (0..8).filter(|&i| mask[i] == 1).collect();
        let sub = Tensor::from_vec(&[4, 11], keep.iter().flat_map(|&i| l.row(i).to_vec()).collect());
        let sub_targets: Vec<TokenId> = keep.iter().map(|&i| targets[i]).collect();
        let (sub_loss, _) = masked_cross_entropy(&sub, &sub_targets, &[1; 4]).unwrap();
        assert!((loss - sub_loss).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_error() {
        let l = logits(2, 3);
        assert!(matches!(
            masked_cross_entropy(&l, &[0, 1], &[0, 0]),
            Err(TrainError::Domain(_))
        ));
        assert!(matches!(
            masked_cross_entropy(&l, &[0], &[1]),
            Err(TrainError::Shape(_))
        ));
    }

    #[test]
    fn masked_rows_have_zero_gradient() {
        let mut l = logits(3, 5);
        cross_entropy_grad_in_place(&mut l, &[1, 2, 3], &[1, 0, 1], 2.0);
        assert!(l.row(1).iter().all(|&g| g == 0.0));
        // Softmax gradient rows sum to zero.
        assert!(l.row(0).iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let l = logits(3, 4);
        let targets = [2, 0, 3];
        let mask = [1, 1, 0];
        let mut g = l.clone();
        cross_entropy_grad_in_place(&mut g, &targets, &mask, 2.0);
        let h = 1e-6;
        for i in 0..l.len() {
            let mut p = l.clone();
            p.data_mut()[i] += h;
            let mut m = l.clone();
            m.data_mut()[i] -= h;
            let fd = (masked_cross_entropy(&p, &targets, &mask).unwrap().0
                - masked_cross_entropy(&m, &targets, &mask).unwrap().0)
                / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }
}

//! Central finite-difference check of autograd gradients.

use candle_core::{Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    /// `‖a − n‖ / max(‖a‖, ‖n‖)` over all checked coordinates.
    pub normwise: f64,
    /// Largest `|a − n| / max(|a|, |n|, floor)` over checked coordinates.
    pub max_elementwise: f64,
}

fn flat(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_vec1::<f64>()?)
}

fn set_coord(var: &Var, values: &mut [f64], i: usize, v: f64) -> Result<()> {
    values[i] = v;
    var.set(&Tensor::from_slice(values, var.shape(), var.device())?)?;
    Ok(())
}

/// Compares gradients of `loss` with respect to `vars` against central
/// differences with step `h`. At most `max_coords` coordinates are checked,
/// drawn uniformly with `seed`; `floor` keeps elementwise ratios finite
/// where both gradients vanish.
pub fn gradient_check(
    vars: &[Var],
    loss: impl Fn() -> Result<Tensor>,
    h: f64,
    floor: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheck> {
    let grads = loss()?.backward()?;
    let sizes: Vec<usize> = vars.iter().map(|v| v.elem_count()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, total, max_coords.min(total)).into_vec();
    picks.sort_unstable();

    let (mut diff2, mut a2, mut n2, mut worst) = (0.0, 0.0, 0.0, 0.0f64);
    let mut offset = 0;
    let mut next = picks.iter().peekable();
    for (var, &size) in vars.iter().zip(&sizes) {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => flat(g)?,
            None => vec![0.0; size],
        };
        let mut values = flat(var.as_tensor())?;
        while let Some(&&p) = next.peek() {
            if p >= offset + size {
                break;
            }
            next.next();
            let i = p - offset;
            let x = values[i];
            set_coord(var, &mut values, i, x + h)?;
            let up = loss()?.to_scalar::<f64>()?;
            set_coord(var, &mut values, i, x - h)?;
            let down = loss()?.to_scalar::<f64>()?;
            set_coord(var, &mut values, i, x)?;
            let n = (up - down) / (2.0 * h);
            let a = analytic[i];
            diff2 += (a - n).powi(2);
            a2 += a * a;
            n2 += n * n;
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(floor));
        }
        offset += size;
    }
    let scale = a2.max(n2).sqrt();
    Ok(GradCheck {
        checked: picks.len(),
        normwise: if scale > 0.0 { diff2.sqrt() / scale } else { 0.0 },
        max_elementwise: worst,
    })
}

//! Central finite-difference verification of autodiff gradients.

use crate::error::{Error, Result};
use crate::numerics::autodiff::{Bindings, Graph, Var};
use crate::numerics::tensor::ParameterSet;

/// Evaluates `f` at `point` without gradient tracking.
pub fn evaluate<F>(f: &F, point: &ParameterSet) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, &Bindings) -> Result<Var>,
{
    let mut g = Graph::new();
    let b = g.bind(point, false);
    let out = f(&mut g, &b)?;
    if g.value(out).len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    Ok(g.scalar(out))
}

/// Worst coordinate found by [`grad_check_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub param: String,
    pub index: usize,
    pub finite_difference: f64,
    pub autodiff: f64,
}

/// Maximum over all coordinates of `|fd - ad| / max(1e-12, |fd| + |ad|)`,
/// where `fd` is the central difference with step `eps` and `ad` the
/// reverse-mode gradient. Every parameter is perturbed, tracked or not.
pub fn grad_check<F>(f: F, point: &ParameterSet, eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, &Bindings) -> Result<Var>,
{
    grad_check_report(f, point, eps).map(|r| r.max_relative_error)
}

pub fn grad_check_report<F>(f: F, point: &ParameterSet, eps: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g>, &Bindings) -> Result<Var>,
{
    let probes = probe_coordinates(f, point, eps)?;
    let mut worst = GradCheckReport {
        max_relative_error: 0.0,
        param: String::new(),
        index: 0,
        finite_difference: 0.0,
        autodiff: 0.0,
    };
    for p in probes.coordinates {
        let rel = p.relative_error();
        if rel > worst.max_relative_error || worst.param.is_empty() {
            worst = GradCheckReport {
                max_relative_error: rel,
                param: p.param,
                index: p.index,
                finite_difference: p.finite_difference,
                autodiff: p.autodiff,
            };
        }
    }
    Ok(worst)
}

/// One perturbed coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateProbe {
    pub param: String,
    pub index: usize,
    pub finite_difference: f64,
    pub autodiff: f64,
}

impl CoordinateProbe {
    pub fn relative_error(&self) -> f64 {
        let (fd, ad) = (self.finite_difference, self.autodiff);
        (fd - ad).abs() / (fd.abs() + ad.abs()).max(1e-12)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probes {
    /// `f` at the unperturbed point.
    pub value: f64,
    pub eps: f64,
    pub coordinates: Vec<CoordinateProbe>,
}

impl Probes {
    /// Smallest nonzero change a central difference can register: one unit
    /// in the last place of `f`, divided by `2 eps`.
    pub fn resolution(&self) -> f64 {
        let v = self.value.abs();
        (f64::from_bits(v.to_bits() + 1) - v) / (2.0 * self.eps)
    }
}

/// Central differences and autodiff gradients for every coordinate.
pub fn probe_coordinates<F>(f: F, point: &ParameterSet, eps: f64) -> Result<Probes>
where
    F: for<'g> Fn(&mut Graph<'g>, &Bindings) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Parameter(format!("eps {eps} outside (0, 1e-3]")));
    }
    let mut probe = point.clone();
    for (_, t) in probe.iter_mut() {
        t.requires_grad = true;
    }

    let value = evaluate(&f, &probe)?;
    let analytic = {
        let mut g = Graph::new();
        let b = g.bind(&probe, true);
        let loss = f(&mut g, &b)?;
        let grads = g.backward(loss)?;
        let mut out = Vec::new();
        for (name, t) in probe.iter() {
            let v = b.get(name)?;
            out.push(
                grads
                    .get(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.len()]),
            );
        }
        out
    };

    let names: Vec<String> = probe.names().cloned().collect();
    let mut coordinates = Vec::new();
    for (name, ad_all) in names.iter().zip(&analytic) {
        let len = probe.get(name).map_or(0, |t| t.len());
        for i in 0..len {
            let original = probe.get(name).unwrap().data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = original + eps;
            let up = evaluate(&f, &probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = original - eps;
            let down = evaluate(&f, &probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = original;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numerical {
                    param: format!("{name}[{i}]"),
                    detail: "non-finite function value at probe".into(),
                });
            }
            coordinates.push(CoordinateProbe {
                param: name.clone(),
                index: i,
                finite_difference: (up - down) / (2.0 * eps),
                autodiff: ad_all[i],
            });
        }
    }
    Ok(Probes {
        value,
        eps,
        coordinates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngStream;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn half_squared_norm_of_linear_map() {
        let mut rng = RngStream::new(5, 0);
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::uniform_init(&[3, 4], 1, &mut rng)).unwrap();
        let x = vec![0.3, -1.2, 0.7, 2.0];
        let f = move |g: &mut Graph<'_>, b: &Bindings| {
            let w = b.get("w")?;
            let xv = g.input(&[4, 1], x.clone())?;
            let y = g.matmul(w, xv)?;
            let sq = g.mul(y, y)?;
            let s = g.sum(sq);
            Ok(g.scale(s, 0.5))
        };
        let err = grad_check(f, &p, 1e-6).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::scalar(2.0)).unwrap();
        let f = |g: &mut Graph<'_>, _: &Bindings| g.input(&[1], vec![3.0]);
        assert_eq!(grad_check(f, &p, 1e-6).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_eps_and_non_finite_probes() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::scalar(0.0)).unwrap();
        let f = |g: &mut Graph<'_>, b: &Bindings| {
            let w = b.get("w")?;
            Ok(g.powf(w, -1.0))
        };
        assert!(matches!(grad_check(f, &p, 1e-2), Err(Error::Parameter(_))));
        let bad = |g: &mut Graph<'_>, b: &Bindings| {
            let w = b.get("w")?;
            let l = g.scale(w, f64::INFINITY);
            Ok(g.sum(l))
        };
        match grad_check(bad, &p, 1e-6) {
            Err(Error::Numerical { param, .. }) => assert_eq!(param, "w[0]"),
            other => panic!("{other:?}"),
        }
    }
}

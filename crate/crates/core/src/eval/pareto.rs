use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub recall5: f64,
    pub size_bytes: f64,
    pub latency_ms: f64,
    pub config: String,
}

/// `a` is at least as good as `b` on recall (higher), size and latency
/// (lower), and strictly better on one of them.
pub fn dominates(a: &ParetoPoint, b: &ParetoPoint) -> bool {
    let no_worse = a.recall5 >= b.recall5 && a.size_bytes <= b.size_bytes && a.latency_ms <= b.latency_ms;
    let better = a.recall5 > b.recall5 || a.size_bytes < b.size_bytes || a.latency_ms < b.latency_ms;
    no_worse && better
}

/// Points that no other point dominates, in input order.
pub fn pareto_front(points: &[ParetoPoint]) -> Result<Vec<ParetoPoint>> {
    if points.is_empty() {
        return Err(Error::Data("pareto front of no points".into()));
    }
    Ok(points
        .iter()
        .filter(|p| !points.iter().any(|q| dominates(q, p)))
        .cloned()
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(r: f64, s: f64, l: f64) -> ParetoPoint {
        ParetoPoint {
            recall5: r,
            size_bytes: s,
            latency_ms: l,
            config: format!("{r}/{s}/{l}"),
        }
    }

    #[test]
    fn examples() {
        let a = p(0.9, 10e6, 5.0);
        let b = p(0.8, 20e6, 9.0);
        assert_eq!(pareto_front(&[a.clone(), b]).unwrap(), vec![a.clone()]);
        assert_eq!(pareto_front(std::slice::from_ref(&a)).unwrap(), vec![a.clone()]);
        assert_eq!(pareto_front(&[a.clone(), a.clone()]).unwrap().len(), 2);
        assert!(pareto_front(&[]).is_err());
    }

    #[test]
    fn trade_offs_are_kept() {
        let pts = [p(0.9, 20.0, 5.0), p(0.8, 10.0, 5.0), p(0.7, 30.0, 1.0), p(0.6, 30.0, 6.0)];
        let front = pareto_front(&pts).unwrap();
        assert_eq!(front.len(), 3);
        assert!(!front.contains(&pts[3]));
    }
}

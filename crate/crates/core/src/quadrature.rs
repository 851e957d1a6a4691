//! Gauss-Legendre rules mapped to the unit interval.

/// Nodes and weights on `[0, 1]` for `points` in `1..=5`; weights sum to 1.
pub fn gauss_legendre(points: usize) -> (Vec<f64>, Vec<f64>) {
    let (nodes, weights): (&[f64], &[f64]) = match points {
        1 => (&[0.0], &[2.0]),
        2 => (&[-0.577_350_269_189_625_8, 0.577_350_269_189_625_8], &[1.0, 1.0]),
        3 => (
            &[-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4],
            &[5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0],
        ),
        4 => (
            &[
                -0.861_136_311_594_052_6,
                -0.339_981_043_584_856_3,
                0.339_981_043_584_856_3,
                0.861_136_311_594_052_6,
            ],
            &[
                0.347_854_845_137_453_9,
                0.652_145_154_862_546_1,
                0.652_145_154_862_546_1,
                0.347_854_845_137_453_9,
            ],
        ),
        5 => (
            &[
                -0.906_179_845_938_664,
                -0.538_469_310_105_683,
                0.0,
                0.538_469_310_105_683,
                0.906_179_845_938_664,
            ],
            &[
                0.236_926_885_056_189_1,
                0.478_628_670_499_366_5,
                0.568_888_888_888_888_9,
                0.478_628_670_499_366_5,
                0.236_926_885_056_189_1,
            ],
        ),
        _ => panic!("gauss_legendre supports 1..=5 points, got {points}"),
    };
    (
        nodes.iter().map(|z| 0.5 * (z + 1.0)).collect(),
        weights.iter().map(|w| 0.5 * w).collect(),
    )
}

/// Tensor-product rule on `[0, 1]^n`: reference points and weights.
pub fn tensor_rule(n: usize, points: usize) -> Vec<([f64; 3], f64)> {
    let (z, w) = gauss_legendre(points);
    let total = points.pow(n as u32);
    (0..total)
        .map(|mut q| {
            let mut p = [0.0; 3];
            let mut wt = 1.0;
            for slot in p.iter_mut().take(n) {
                let i = q % points;
                q /= points;
                *slot = z[i];
                wt *= w[i];
            }
            (p, wt)
        })
        .collect()
}

/// `rule` applied on each of the `2^n` half-size sub-cubes of `[0, 1]^n`.
pub fn halved(rule: &[([f64; 3], f64)], n: usize) -> Vec<([f64; 3], f64)> {
    let parts = 1usize << n;
    (0..parts)
        .flat_map(|bits| {
            rule.iter().map(move |(z, w)| {
                let mut p = *z;
                for (a, slot) in p.iter_mut().enumerate().take(n) {
                    *slot = 0.5 * (*slot + ((bits >> a) & 1) as f64);
                }
                (p, w / parts as f64)
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rules_integrate_monomials_exactly() {
        for m in 1..=5 {
            let (z, w) = gauss_legendre(m);
            for deg in 0..(2 * m) {
                let q: f64 = z.iter().zip(&w).map(|(x, wt)| wt * x.powi(deg as i32)).sum();
                let exact = 1.0 / (deg as f64 + 1.0);
                assert!((q - exact).abs() < 1e-14, "m={m} deg={deg}: {q} vs {exact}");
            }
        }
    }

    #[test]
    fn tensor_weights_sum_to_one() {
        for n in 1..=3 {
            let s: f64 = tensor_rule(n, 3).iter().map(|(_, w)| w).sum();
            assert!((s - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn halved_rule_is_a_composite_rule() {
        for n in 1..=3 {
            let r = halved(&tensor_rule(n, 2), n);
            assert_eq!(r.len(), (1 << n) * 2usize.pow(n as u32));
            let s: f64 = r.iter().map(|(_, w)| w).sum();
            assert!((s - 1.0).abs() < 1e-14);
            // |x - 1/2| has a kink the plain rule misses but the halves resolve exactly.
            let q: f64 = r.iter().map(|(z, w)| w * (z[0] - 0.5).abs()).sum();
            assert!((q - 0.25).abs() < 1e-14);
        }
    }
}

//! Replace BatchNorm -> SignFn with a per-channel threshold.
//!
//! For scale s = sqrt(sigma2 + eps) the algebraic threshold is
//! tau = mu - beta*s/gamma, compared >= for gamma > 0 and <= for
//! gamma < 0; gamma = 0 channels are constant by the sign of beta.
//!
//! The stored tau is then refined to the exact f64 decision boundary of
//! the reference norm evaluation: the comparison `y >= tau` (resp. <=)
//! reproduces sign(norm(y)) for every f64 input, not merely within
//! rounding distance. The refinement is a monotone bisection over the
//! total order of f64 bit patterns; it reduces to the algebraic value
//! whenever that value is exact.

use crate::error::Result;
use crate::ir::{BnParams, Graph, Node, NodeId, OpKind, Producer, ThresholdDir, ThresholdParams};

use super::{PassName, PassStats};

/// Monotone key: orders f64 by value over all finite and infinite inputs.
fn f64_key(x: f64) -> u64 {
    let b = x.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | 0x8000_0000_0000_0000
    }
}

fn f64_from_key(k: u64) -> f64 {
    if k >> 63 == 1 {
        f64::from_bits(k & 0x7FFF_FFFF_FFFF_FFFF)
    } else {
        f64::from_bits(!k)
    }
}

/// Exact threshold parameters for one channel of a batch norm.
fn channel_threshold(bn: &BnParams, c: usize) -> (f64, ThresholdDir) {
    let gamma = bn.gamma[c] as f64;
    let beta = bn.beta[c] as f64;
    if gamma == 0.0 {
        let dir = if beta >= 0.0 {
            ThresholdDir::ConstPos
        } else {
            ThresholdDir::ConstNeg
        };
        return (0.0, dir);
    }

    let eval = |y: f64| bn.apply(c, y);
    let lo_end = -f64::MAX;
    let hi_end = f64::MAX;

    if gamma > 0.0 {
        // {y : norm(y) >= 0} is upward closed under the monotone f64
        // evaluation; find its least element.
        if eval(lo_end) >= 0.0 {
            return (0.0, ThresholdDir::ConstPos);
        }
        if eval(hi_end) < 0.0 {
            return (0.0, ThresholdDir::ConstNeg);
        }
        let mut lo = f64_key(lo_end); // norm < 0
        let mut hi = f64_key(hi_end); // norm >= 0
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if eval(f64_from_key(mid)) >= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        (f64_from_key(hi), ThresholdDir::Ge)
    } else {
        // decreasing: the set is downward closed; find its greatest element.
        if eval(hi_end) >= 0.0 {
            return (0.0, ThresholdDir::ConstPos);
        }
        if eval(lo_end) < 0.0 {
            return (0.0, ThresholdDir::ConstNeg);
        }
        let mut lo = f64_key(lo_end); // norm >= 0
        let mut hi = f64_key(hi_end); // norm < 0
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if eval(f64_from_key(mid)) >= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (f64_from_key(lo), ThresholdDir::Le)
    }
}

/// Threshold parameters equivalent to sign(norm(.)) per channel.
pub fn threshold_from_bn(bn: &BnParams) -> ThresholdParams {
    let mut tau = Vec::with_capacity(bn.channels());
    let mut direction = Vec::with_capacity(bn.channels());
    for c in 0..bn.channels() {
        let (t, d) = channel_threshold(bn, c);
        tau.push(t);
        direction.push(d);
    }
    ThresholdParams { tau, direction }
}

pub fn fuse_bn_sign_to_threshold(graph: &mut Graph) -> Result<PassStats> {
    let mut stats = PassStats {
        name: PassName::FuseBnSignToThreshold.as_str().to_string(),
        nodes_before: graph.node_count(),
        ..Default::default()
    };

    struct Site {
        bn: NodeId,
        sign: NodeId,
    }
    let mut sites = Vec::new();
    for (sid, node) in graph.iter_nodes() {
        if !matches!(node.op, OpKind::SignFn) {
            continue;
        }
        let Producer::Node(bnid) = graph.value(node.inputs[0]).producer else {
            continue;
        };
        if !matches!(graph.node(bnid).op, OpKind::BatchNorm(_)) {
            continue;
        }
        // the norm's value must have no other readers
        if graph.consumers(graph.node(bnid).output).len() != 1
            || graph.is_graph_output(graph.node(bnid).output)
        {
            continue;
        }
        sites.push(Site { bn: bnid, sign: sid });
    }

    for site in sites {
        stats.matched += 1;
        let bn_node = graph.node(site.bn);
        let params = match &bn_node.op {
            OpKind::BatchNorm(p) => p.clone(),
            _ => unreachable!(),
        };
        let v_pre = bn_node.inputs[0];
        let bn_name = bn_node.name.clone();
        let v_out = graph.node(site.sign).output;

        let th = threshold_from_bn(&params);
        let new_id = graph.add_raw_node(Node {
            name: format!("{bn_name}.th"),
            op: OpKind::Threshold(th),
            inputs: vec![v_pre],
            output: v_out,
        });
        graph.value_mut(v_out).producer = Producer::Node(new_id);
        graph.remove_node(site.bn);
        graph.remove_node(site.sign);
        stats.added_nodes += 1;
        stats.removed_nodes += 2;
        stats.rewritten += 1;
    }

    graph.compact()?;
    stats.nodes_after = graph.node_count();
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::DEFAULT_BN_EPS;
    use crate::oracle::sign_pm;

    fn bn1(gamma: f32, beta: f32, mu: f32, sigma2_plus_eps: f32) -> BnParams {
        BnParams {
            gamma: vec![gamma],
            beta: vec![beta],
            mu: vec![mu],
            sigma2: vec![sigma2_plus_eps - DEFAULT_BN_EPS],
            eps: DEFAULT_BN_EPS,
            affine_free: false,
        }
    }

    #[test]
    fn hand_algebra_case() {
        // gamma=2, beta=1, mu=3, sigma2+eps=4: tau = 3 - 1*2/2 = 2, >=
        let th = threshold_from_bn(&bn1(2.0, 1.0, 3.0, 4.0));
        assert_eq!(th.tau[0], 2.0);
        assert_eq!(th.direction[0], ThresholdDir::Ge);
    }

    #[test]
    fn affine_free_gives_tau_mu() {
        let mut bn = bn1(1.0, 0.0, 0.75, 1.0);
        bn.affine_free = true;
        let th = threshold_from_bn(&bn);
        assert_eq!(th.tau[0], 0.75);
        assert_eq!(th.direction[0], ThresholdDir::Ge);
    }

    #[test]
    fn negative_gamma_flips_direction() {
        // gamma=-1, beta=0, mu=0, sigma2+eps=1: tau=0, <=; y=1 -> -1
        let th = threshold_from_bn(&bn1(-1.0, 0.0, 0.0, 1.0));
        assert_eq!(th.tau[0], 0.0);
        assert_eq!(th.direction[0], ThresholdDir::Le);
        assert_eq!(th.apply(0, 1.0), -1.0);
        assert_eq!(th.apply(0, 0.0), 1.0);
    }

    #[test]
    fn zero_gamma_is_constant_by_beta() {
        let th = threshold_from_bn(&bn1(0.0, 0.5, 1.0, 1.0));
        assert_eq!(th.direction[0], ThresholdDir::ConstPos);
        let th = threshold_from_bn(&bn1(0.0, -0.5, 1.0, 1.0));
        assert_eq!(th.direction[0], ThresholdDir::ConstNeg);
        // beta exactly 0 follows sign(0) = +1
        let th = threshold_from_bn(&bn1(0.0, 0.0, 1.0, 1.0));
        assert_eq!(th.direction[0], ThresholdDir::ConstPos);
    }

    #[test]
    fn boundary_is_exact_around_tau() {
        let mut rng = crate::init::SplitMix64::new(42);
        for _ in 0..500 {
            let gamma = (rng.uniform(0.1, 3.0) * if rng.next_f64() < 0.5 { -1.0 } else { 1.0 }) as f32;
            let beta = rng.uniform(-2.0, 2.0) as f32;
            let mu = rng.uniform(-2.0, 2.0) as f32;
            let sigma2 = rng.uniform(1e-3, 9.0) as f32;
            let bn = BnParams {
                gamma: vec![gamma],
                beta: vec![beta],
                mu: vec![mu],
                sigma2: vec![sigma2],
                eps: DEFAULT_BN_EPS,
                affine_free: false,
            };
            let th = threshold_from_bn(&bn);
            let tau = th.tau[0];
            for y in [
                tau,
                f64_from_key(f64_key(tau) + 1),
                f64_from_key(f64_key(tau) - 1),
                tau + 0.5,
                tau - 0.5,
            ] {
                assert_eq!(
                    th.apply(0, y),
                    sign_pm(bn.apply(0, y)),
                    "gamma={gamma} beta={beta} mu={mu} s2={sigma2} y={y:e}"
                );
            }
        }
    }

    #[test]
    fn key_roundtrip_is_monotone() {
        let xs = [-f64::MAX, -1.5, -0.0, 0.0, 1e-300, 2.0, f64::MAX];
        for w in xs.windows(2) {
            assert!(f64_key(w[0]) <= f64_key(w[1]));
        }
        for &x in &xs {
            assert_eq!(f64_from_key(f64_key(x)).to_bits(), x.to_bits());
        }
    }
}

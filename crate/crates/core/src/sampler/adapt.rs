use std::collections::VecDeque;

use super::SamplerConfig;

/// Fraction of accepted moves among the decisions currently in the window.
pub fn window_rate(window: &VecDeque<bool>) -> Option<f64> {
    if window.is_empty() {
        None
    } else {
        Some(window.iter().filter(|a| **a).count() as f64 / window.len() as f64)
    }
}

/// Pushes a decision and drops the oldest ones beyond `capacity`.
pub fn record_decision(window: &mut VecDeque<bool>, accepted: bool, capacity: usize) {
    window.push_back(accepted);
    while window.len() > capacity {
        window.pop_front();
    }
}

/// Dead-band stepsize rule, with its factor pulled towards one after burn-in.
///
/// `iteration` counts from one. By default high acceptance grows the step and
/// low acceptance shrinks it; `paper_literal_adapt` swaps the two factors.
pub fn adapt_stepsize(epsilon: f64, rate: f64, iteration: u64, config: &SamplerConfig) -> f64 {
    let (high, low) = if config.paper_literal_adapt {
        (config.beta_shrink, config.beta_grow)
    } else {
        (config.beta_grow, config.beta_shrink)
    };
    let beta = if rate > config.alpha_u {
        high
    } else if rate < config.alpha_d {
        low
    } else {
        return epsilon;
    };
    epsilon * damped_factor(beta, iteration, config.n_bi as u64, config.adapt_decay)
}

/// `beta` during burn-in, `1 - (1 - beta) exp(-decay (t - n_bi))` after.
pub fn damped_factor(beta: f64, iteration: u64, n_bi: u64, decay: f64) -> f64 {
    if iteration <= n_bi {
        beta
    } else {
        1.0 - (1.0 - beta) * (-decay * (iteration - n_bi) as f64).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dead_band_leaves_stepsize() {
        let c = SamplerConfig::default();
        assert_eq!(adapt_stepsize(0.3, 0.5, 10, &c), 0.3);
        assert_eq!(adapt_stepsize(0.3, 0.9, 10, &c), 0.3);
        assert_eq!(adapt_stepsize(0.3, 0.3, 10, &c), 0.3);
    }

    #[test]
    fn burn_in_branches() {
        let c = SamplerConfig::default();
        assert_eq!(adapt_stepsize(1.0, 1.0, 10, &c), 1.1);
        assert_eq!(adapt_stepsize(1.0, 0.0, 10, &c), 0.9);
        let lit = SamplerConfig { paper_literal_adapt: true, ..c };
        assert_eq!(adapt_stepsize(1.0, 1.0, 10, &lit), 0.9);
        assert_eq!(adapt_stepsize(1.0, 0.0, 10, &lit), 1.1);
    }

    #[test]
    fn damping_is_monotone_towards_one() {
        for beta in [0.9, 1.1] {
            let mut prev = (damped_factor(beta, 500, 500, 0.01) - 1.0).abs();
            assert_eq!(prev, (beta - 1.0f64).abs());
            for t in 501..3000u64 {
                let dev = (damped_factor(beta, t, 500, 0.01) - 1.0).abs();
                assert!(dev < prev);
                prev = dev;
            }
            assert!(prev < 1e-10);
        }
    }

    #[test]
    fn window_keeps_last_decisions() {
        let mut w = VecDeque::new();
        assert_eq!(window_rate(&w), None);
        for i in 0..120 {
            record_decision(&mut w, i % 4 == 0, 50);
        }
        assert_eq!(w.len(), 50);
        // decisions 70..120, of which those divisible by 4 were accepted
        let expect = (70..120).filter(|i| i % 4 == 0).count() as f64 / 50.0;
        assert_eq!(window_rate(&w), Some(expect));
    }
}

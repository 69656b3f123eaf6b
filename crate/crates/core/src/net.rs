//! Network state model: regime-bounded (RTT, bandwidth) pairs, Gauss-Markov
//! drift, and the state-to-cost scaling factor kappa.
//!
//! Internal units are seconds and bits/second. Milliseconds and Mbit/s appear
//! only at I/O boundaries (trace files, configs).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::fixed6;

/// Observed link state: round-trip time in seconds, bandwidth in bits/second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub rtt: f64,
    pub bw: f64,
}

impl NetworkState {
    pub fn new(rtt: f64, bw: f64) -> Result<Self> {
        if !(rtt > 0.0) || !(bw > 0.0) {
            return Err(Error::domain(format!(
                "network state must be strictly positive, got rtt={rtt}, bw={bw}"
            )));
        }
        Ok(NetworkState { rtt, bw })
    }

    pub fn rtt_ms(&self) -> f64 {
        self.rtt * 1e3
    }

    pub fn bw_mbps(&self) -> f64 {
        self.bw / 1e6
    }
}

/// Named network regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RegimeName {
    Good,
    Mid,
    Bad,
}

impl fmt::Display for RegimeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RegimeName::Good => "GOOD",
            RegimeName::Mid => "MID",
            RegimeName::Bad => "BAD",
        };
        f.write_str(s)
    }
}

impl FromStr for RegimeName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "GOOD" => Ok(RegimeName::Good),
            "MID" => Ok(RegimeName::Mid),
            "BAD" => Ok(RegimeName::Bad),
            other => Err(Error::usage(format!("unknown regime name: {other}"))),
        }
    }
}

/// Sampling bounds for one regime. Ranges are `(min, max)` with `min <= max`;
/// a degenerate `min == max` range pins the coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub name: RegimeName,
    /// RTT bounds in seconds.
    pub rtt_range: (f64, f64),
    /// Bandwidth bounds in bits/second.
    pub bw_range: (f64, f64),
}

impl Regime {
    pub fn new(name: RegimeName, rtt_range: (f64, f64), bw_range: (f64, f64)) -> Result<Self> {
        for (label, (lo, hi)) in [("rtt", rtt_range), ("bw", bw_range)] {
            if !(lo > 0.0) || !(hi >= lo) {
                return Err(Error::domain(format!(
                    "{label} range must satisfy 0 < min <= max, got ({lo}, {hi})"
                )));
            }
        }
        Ok(Regime {
            name,
            rtt_range,
            bw_range,
        })
    }

    /// GOOD regime: BW 120-200 Mbit/s, RTT 20-40 ms.
    pub fn good() -> Self {
        Regime {
            name: RegimeName::Good,
            rtt_range: (0.020, 0.040),
            bw_range: (120e6, 200e6),
        }
    }

    /// MID regime: BW 30-80 Mbit/s, RTT 40-80 ms.
    pub fn mid() -> Self {
        Regime {
            name: RegimeName::Mid,
            rtt_range: (0.040, 0.080),
            bw_range: (30e6, 80e6),
        }
    }

    /// BAD regime: BW 5-15 Mbit/s, RTT 80-130 ms.
    pub fn bad() -> Self {
        Regime {
            name: RegimeName::Bad,
            rtt_range: (0.080, 0.130),
            bw_range: (5e6, 15e6),
        }
    }

    pub fn by_name(name: RegimeName) -> Self {
        match name {
            RegimeName::Good => Regime::good(),
            RegimeName::Mid => Regime::mid(),
            RegimeName::Bad => Regime::bad(),
        }
    }

    pub fn midpoint(&self) -> NetworkState {
        NetworkState {
            rtt: 0.5 * (self.rtt_range.0 + self.rtt_range.1),
            bw: 0.5 * (self.bw_range.0 + self.bw_range.1),
        }
    }

    pub fn contains(&self, state: &NetworkState) -> bool {
        state.rtt >= self.rtt_range.0
            && state.rtt <= self.rtt_range.1
            && state.bw >= self.bw_range.0
            && state.bw <= self.bw_range.1
    }
}

/// Per-step Gauss-Markov jitter scales. Independent per coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftParams {
    /// RTT jitter standard deviation, seconds.
    pub sigma_rtt: f64,
    /// Bandwidth jitter standard deviation, bits/second.
    pub sigma_bw: f64,
    /// Project each coordinate back into the regime range after the step.
    pub clamp: bool,
}

impl Default for DriftParams {
    fn default() -> Self {
        DriftParams {
            sigma_rtt: 0.002,
            sigma_bw: 2e6,
            clamp: true,
        }
    }
}

impl DriftParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_rtt < 0.0 || self.sigma_bw < 0.0 {
            return Err(Error::domain("drift sigmas must be nonnegative".to_string()));
        }
        Ok(())
    }
}

/// Parameters of the multiplicative power-law cost scaling
/// `kappa = (price/c_ref)^exp_price * (rtt/rtt_ref)^exp_rtt * (bw_ref/bw)^exp_bw`.
///
/// References default to the MID-regime midpoints so kappa(MID midpoint) = 1
/// at the default token price.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaParams {
    /// Reference RTT, seconds.
    pub rtt_ref: f64,
    /// Reference bandwidth, bits/second.
    pub bw_ref: f64,
    /// Reference token price, currency/token.
    pub c_ref: f64,
    pub exp_rtt: f64,
    pub exp_bw: f64,
    pub exp_price: f64,
}

impl Default for KappaParams {
    fn default() -> Self {
        KappaParams {
            rtt_ref: 0.060,
            bw_ref: 55e6,
            c_ref: crate::econ::DEFAULT_TOKEN_PRICE,
            exp_rtt: 1.0,
            exp_bw: 1.0,
            exp_price: 1.0,
        }
    }
}

impl KappaParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rtt_ref > 0.0 && self.bw_ref > 0.0 && self.c_ref > 0.0) {
            return Err(Error::domain("kappa references must be strictly positive".to_string()));
        }
        if self.exp_rtt < 0.0 || self.exp_bw < 0.0 || self.exp_price < 0.0 {
            return Err(Error::domain("kappa exponents must be nonnegative".to_string()));
        }
        Ok(())
    }
}

/// Draw a state uniformly from the regime's rectangles.
pub fn sample_regime_state<R: Rng + ?Sized>(regime: &Regime, rng: &mut R) -> NetworkState {
    let rtt = rng.random_range(regime.rtt_range.0..=regime.rtt_range.1);
    let bw = rng.random_range(regime.bw_range.0..=regime.bw_range.1);
    NetworkState { rtt, bw }
}

/// One Gauss-Markov step `S' = S + eps`, `eps ~ Normal(0, diag(sigma^2))`.
///
/// With `clamp` on, each coordinate is projected into the regime range.
/// Without it the walk is free; a positivity floor keeps the state valid.
pub fn gauss_markov_step<R: Rng + ?Sized>(
    state: &NetworkState,
    drift: &DriftParams,
    regime: &Regime,
    rng: &mut R,
) -> NetworkState {
    let eps_rtt = Normal::new(0.0, drift.sigma_rtt).expect("valid sigma").sample(rng);
    let eps_bw = Normal::new(0.0, drift.sigma_bw).expect("valid sigma").sample(rng);
    let mut rtt = state.rtt + eps_rtt;
    let mut bw = state.bw + eps_bw;
    if drift.clamp {
        rtt = rtt.clamp(regime.rtt_range.0, regime.rtt_range.1);
        bw = bw.clamp(regime.bw_range.0, regime.bw_range.1);
    } else {
        rtt = rtt.max(f64::MIN_POSITIVE);
        bw = bw.max(f64::MIN_POSITIVE);
    }
    NetworkState { rtt, bw }
}

/// Cost scaling factor for the cloud-minus-edge marginal cost.
///
/// Strictly positive, increasing in RTT and price, decreasing in bandwidth
/// for positive exponents.
pub fn kappa(state: &NetworkState, price: f64, params: &KappaParams) -> Result<f64> {
    params.validate()?;
    if !(state.rtt > 0.0 && state.bw > 0.0) {
        return Err(Error::domain("kappa requires a strictly positive network state".to_string()));
    }
    if !(price > 0.0) {
        return Err(Error::domain(format!("kappa requires a strictly positive price, got {price}")));
    }
    Ok((price / params.c_ref).powf(params.exp_price)
        * (state.rtt / params.rtt_ref).powf(params.exp_rtt)
        * (params.bw_ref / state.bw).powf(params.exp_bw))
}

/// One trace row: the regime the step was drawn under and the resulting state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub regime: RegimeName,
    pub state: NetworkState,
}

/// Generate a concatenated trace. Each schedule segment starts from a fresh
/// regime sample and then drifts; deterministic in `(schedule, drift, seed)`.
pub fn make_trace(
    schedule: &[(Regime, usize)],
    drift: &DriftParams,
    seed: u64,
) -> Result<Vec<TraceStep>> {
    if schedule.is_empty() {
        return Err(Error::usage("trace schedule must be nonempty".to_string()));
    }
    drift.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = Vec::new();
    for (regime, count) in schedule {
        if *count == 0 {
            return Err(Error::usage("trace segment step count must be >= 1".to_string()));
        }
        let mut state = sample_regime_state(regime, &mut rng);
        trace.push(TraceStep {
            regime: regime.name,
            state,
        });
        for _ in 1..*count {
            state = gauss_markov_step(&state, drift, regime, &mut rng);
            trace.push(TraceStep {
                regime: regime.name,
                state,
            });
        }
    }
    Ok(trace)
}

/// Render the trace in the `step,regime,rtt_ms,bw_mbps` format.
pub fn trace_to_csv(trace: &[TraceStep]) -> String {
    let mut out = String::from("step,regime,rtt_ms,bw_mbps\n");
    for (i, row) in trace.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            i,
            row.regime,
            fixed6(row.state.rtt_ms()),
            fixed6(row.state.bw_mbps())
        ));
    }
    out
}

/// Parse a trace file produced by [`trace_to_csv`].
pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceStep>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::usage("empty trace file".to_string()))?;
    if header.trim() != "step,regime,rtt_ms,bw_mbps" {
        return Err(Error::usage(format!("unexpected trace header: {header}")));
    }
    let mut trace = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::usage(format!("trace line {} has {} fields", lineno + 2, fields.len())));
        }
        let regime: RegimeName = fields[1].parse()?;
        let rtt_ms: f64 = fields[2]
            .parse()
            .map_err(|_| Error::usage(format!("bad rtt_ms at line {}", lineno + 2)))?;
        let bw_mbps: f64 = fields[3]
            .parse()
            .map_err(|_| Error::usage(format!("bad bw_mbps at line {}", lineno + 2)))?;
        trace.push(TraceStep {
            regime,
            state: NetworkState::new(rtt_ms * 1e-3, bw_mbps * 1e6)?,
        });
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn degenerate_range_sample_is_exact() {
        let regime = Regime::new(RegimeName::Good, (0.030, 0.030), (150e6, 150e6)).unwrap();
        let state = sample_regime_state(&regime, &mut rng(1));
        assert_eq!(state.rtt, 0.030);
        assert_eq!(state.bw, 150e6);
    }

    #[test]
    fn good_samples_stay_in_bounds() {
        let regime = Regime::good();
        let mut r = rng(2);
        for _ in 0..1000 {
            let s = sample_regime_state(&regime, &mut r);
            assert!(s.rtt >= 0.020 && s.rtt <= 0.040);
            assert!(s.bw >= 120e6 && s.bw <= 200e6);
        }
    }

    #[test]
    fn good_mean_rtt_matches_uniform_mean() {
        // Uniform on [a,b]: mean (a+b)/2, variance (b-a)^2/12.
        let regime = Regime::good();
        let n = 10_000usize;
        let mut r = rng(3);
        let mean: f64 = (0..n)
            .map(|_| sample_regime_state(&regime, &mut r).rtt)
            .sum::<f64>()
            / n as f64;
        let se = (0.040f64 - 0.020).powi(2) / 12.0;
        let se = (se / n as f64).sqrt();
        assert!(
            (mean - 0.030).abs() < 3.0 * se,
            "mean {mean} off from 0.030 by more than 3 SE ({se})"
        );
    }

    #[test]
    fn zero_sigma_step_is_identity() {
        let regime = Regime::good();
        let drift = DriftParams {
            sigma_rtt: 0.0,
            sigma_bw: 0.0,
            clamp: true,
        };
        let start = regime.midpoint();
        let next = gauss_markov_step(&start, &drift, &regime, &mut rng(4));
        assert_eq!(next, start);
    }

    #[test]
    fn clamp_projects_to_range_maximum() {
        let regime = Regime::good();
        let drift = DriftParams {
            sigma_rtt: 10.0,
            sigma_bw: 1e9,
            clamp: true,
        };
        let at_max = NetworkState::new(0.040, 200e6).unwrap();
        let mut saw_top_hit = false;
        for seed in 0..64 {
            // Replay the same draws unclamped to know which side they landed on.
            let raw = gauss_markov_step(
                &at_max,
                &DriftParams { clamp: false, ..drift },
                &regime,
                &mut rng(seed),
            );
            let clamped = gauss_markov_step(&at_max, &drift, &regime, &mut rng(seed));
            assert!(regime.contains(&clamped));
            if raw.rtt > 0.040 {
                assert_eq!(clamped.rtt, 0.040);
                saw_top_hit = true;
            }
        }
        assert!(saw_top_hit, "no positive draw observed; widen the seed sweep");
    }

    #[test]
    fn unclamped_walk_variance_matches_random_walk_law() {
        // After k independent Gaussian steps the displacement variance is
        // k * sigma^2 per coordinate.
        let regime = Regime::good();
        let drift = DriftParams {
            sigma_rtt: 0.0005,
            sigma_bw: 1e5,
            clamp: false,
        };
        let k = 16;
        let n = 10_000;
        let start = regime.midpoint();
        let mut r = rng(5);
        let mut finals_rtt = Vec::with_capacity(n);
        let mut finals_bw = Vec::with_capacity(n);
        for _ in 0..n {
            let mut s = start;
            for _ in 0..k {
                s = gauss_markov_step(&s, &drift, &regime, &mut r);
            }
            finals_rtt.push(s.rtt - start.rtt);
            finals_bw.push(s.bw - start.bw);
        }
        let var = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
        };
        let expect_rtt = k as f64 * drift.sigma_rtt.powi(2);
        let expect_bw = k as f64 * drift.sigma_bw.powi(2);
        assert!((var(&finals_rtt) - expect_rtt).abs() / expect_rtt < 0.10);
        assert!((var(&finals_bw) - expect_bw).abs() / expect_bw < 0.10);
    }

    #[test]
    fn kappa_is_one_at_reference() {
        let params = KappaParams::default();
        let state = NetworkState::new(params.rtt_ref, params.bw_ref).unwrap();
        let k = kappa(&state, params.c_ref, &params).unwrap();
        assert!((k - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kappa_power_law_substitution() {
        let params = KappaParams::default();
        let state = NetworkState::new(params.rtt_ref, params.bw_ref).unwrap();
        let doubled = NetworkState::new(2.0 * params.rtt_ref, params.bw_ref).unwrap();
        let base = kappa(&state, params.c_ref, &params).unwrap();
        let scaled = kappa(&doubled, params.c_ref, &params).unwrap();
        assert!((scaled / base - 2.0).abs() < 1e-12);
    }

    #[test]
    fn kappa_orders_regime_midpoints() {
        let params = KappaParams::default();
        let price = params.c_ref;
        let good = kappa(&Regime::good().midpoint(), price, &params).unwrap();
        let mid = kappa(&Regime::mid().midpoint(), price, &params).unwrap();
        let bad = kappa(&Regime::bad().midpoint(), price, &params).unwrap();
        assert!(good < mid && mid < bad, "got {good}, {mid}, {bad}");
    }

    #[test]
    fn kappa_monotone_directions() {
        let params = KappaParams::default();
        let mut r = rng(6);
        for _ in 0..200 {
            let rtt = r.random_range(0.005..0.2);
            let bw = r.random_range(1e6..2e8);
            let price = r.random_range(1e-6..1e-4);
            let state = NetworkState::new(rtt, bw).unwrap();
            let base = kappa(&state, price, &params).unwrap();
            assert!(base > 0.0);
            let worse_rtt = NetworkState::new(rtt * 1.1, bw).unwrap();
            let better_bw = NetworkState::new(rtt, bw * 1.1).unwrap();
            assert!(kappa(&worse_rtt, price, &params).unwrap() > base);
            assert!(kappa(&better_bw, price, &params).unwrap() < base);
            assert!(kappa(&state, price * 1.1, &params).unwrap() > base);
        }
    }

    #[test]
    fn kappa_rejects_nonpositive_price() {
        let params = KappaParams::default();
        let state = Regime::mid().midpoint();
        assert!(kappa(&state, 0.0, &params).is_err());
    }

    #[test]
    fn trace_single_step_schedule() {
        let trace = make_trace(&[(Regime::good(), 1)], &DriftParams::default(), 7).unwrap();
        assert_eq!(trace.len(), 1);
        assert_eq!(trace[0].regime, RegimeName::Good);
        assert!(Regime::good().contains(&trace[0].state));
    }

    #[test]
    fn trace_is_deterministic_and_serializes_identically() {
        let schedule = [(Regime::good(), 50), (Regime::bad(), 50)];
        let a = make_trace(&schedule, &DriftParams::default(), 11).unwrap();
        let b = make_trace(&schedule, &DriftParams::default(), 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(trace_to_csv(&a), trace_to_csv(&b));
        let c = make_trace(&schedule, &DriftParams::default(), 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn trace_regime_switch_jumps_with_zero_sigma() {
        let drift = DriftParams {
            sigma_rtt: 0.0,
            sigma_bw: 0.0,
            clamp: true,
        };
        let trace = make_trace(&[(Regime::good(), 100), (Regime::bad(), 100)], &drift, 13).unwrap();
        assert_eq!(trace.len(), 200);
        for row in &trace[..100] {
            assert_eq!(row.state, trace[0].state);
            assert!(Regime::good().contains(&row.state));
        }
        for row in &trace[100..] {
            assert_eq!(row.state, trace[100].state);
            assert!(Regime::bad().contains(&row.state));
        }
        assert_ne!(trace[99].state, trace[100].state);
    }

    #[test]
    fn clamped_trace_stays_in_bounds() {
        let trace = make_trace(&[(Regime::mid(), 500)], &DriftParams::default(), 17).unwrap();
        for row in &trace {
            assert!(Regime::mid().contains(&row.state));
        }
    }

    #[test]
    fn trace_csv_round_trip() {
        let trace = make_trace(&[(Regime::good(), 5), (Regime::mid(), 5)], &DriftParams::default(), 19).unwrap();
        let csv = trace_to_csv(&trace);
        let parsed = parse_trace_csv(&csv).unwrap();
        assert_eq!(parsed.len(), trace.len());
        for (p, t) in parsed.iter().zip(&trace) {
            assert_eq!(p.regime, t.regime);
            // 6-decimal ms/Mbps columns quantize the state.
            assert!((p.state.rtt - t.state.rtt).abs() < 1e-9);
            assert!((p.state.bw - t.state.bw).abs() < 1.0);
        }
    }

    #[test]
    fn empty_schedule_is_usage_error() {
        assert!(matches!(
            make_trace(&[], &DriftParams::default(), 1),
            Err(Error::Usage(_))
        ));
    }
}

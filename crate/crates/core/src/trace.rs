//! Request traces: file ingestion and synthesis.
//!
//! File format: one request per line, four fields separated by commas and/or
//! whitespace: `id arrival_ms input_len output_len`. Blank lines and lines
//! starting with `#` are ignored.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use sha2::{Digest, Sha256};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::model::Request;

/// Log-space standard deviation used for synthesized lengths.
pub const DEFAULT_LENGTH_SIGMA: f64 = 0.8;
/// Synthesized lengths are truncated to `[1, TRUNCATION_FACTOR * mean]`.
pub const TRUNCATION_FACTOR: f64 = 16.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub name: String,
    pub requests: Vec<Request>,
}

impl Trace {
    /// Validates and sorts by arrival time; ties keep their input order.
    pub fn new(name: impl Into<String>, mut requests: Vec<Request>) -> Result<Self> {
        if requests.is_empty() {
            return Err(Error::EmptyTrace);
        }
        let mut ids = HashSet::with_capacity(requests.len());
        for r in &requests {
            check_request(r).map_err(Error::InvalidArgument)?;
            if !ids.insert(r.id) {
                return Err(Error::InvalidArgument(format!("duplicate request id {}", r.id)));
            }
        }
        requests.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time));
        Ok(Trace {
            name: name.into(),
            requests,
        })
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    /// Canonical text form, readable by [`parse_trace`].
    pub fn to_text(&self) -> String {
        let mut out = String::from("# id,arrival_ms,input_len,output_len\n");
        for r in &self.requests {
            let _ = writeln!(out, "{},{:?},{},{}", r.id, r.arrival_time, r.input_len, r.output_len);
        }
        out
    }

    /// Hex SHA-256 prefix of the canonical text, for tagging results.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn mean_lengths(&self) -> (f64, f64) {
        let n = self.requests.len() as f64;
        let input = self.requests.iter().map(|r| r.input_len as f64).sum::<f64>() / n;
        let output = self.requests.iter().map(|r| r.output_len as f64).sum::<f64>() / n;
        (input, output)
    }

    /// Same requests, all arriving at t = 0.
    pub fn all_at_zero(&self) -> Trace {
        let mut t = self.clone();
        for r in &mut t.requests {
            r.arrival_time = 0.0;
        }
        t
    }
}

fn check_request(r: &Request) -> std::result::Result<(), String> {
    if r.input_len < 1 {
        return Err("input_len must be ≥ 1".into());
    }
    if r.output_len < 1 {
        return Err("output_len must be ≥ 1".into());
    }
    if !(r.arrival_time.is_finite() && r.arrival_time >= 0.0) {
        return Err("arrival_ms must be a non-negative number".into());
    }
    Ok(())
}

pub fn parse_trace(name: &str, text: &str) -> Result<Trace> {
    let mut requests = Vec::new();
    let mut ids = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = idx + 1;
        let err = |message: String| Error::Parse {
            line: lineno,
            message,
        };
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        }
        let id: u64 = fields[0]
            .parse()
            .map_err(|_| err(format!("bad id {:?}", fields[0])))?;
        let arrival_time: f64 = fields[1]
            .parse()
            .map_err(|_| err(format!("bad arrival_ms {:?}", fields[1])))?;
        let input_len: u32 = fields[2]
            .parse()
            .map_err(|_| err(format!("bad input_len {:?}", fields[2])))?;
        let output_len: u32 = fields[3]
            .parse()
            .map_err(|_| err(format!("bad output_len {:?}", fields[3])))?;
        let r = Request {
            id,
            arrival_time,
            input_len,
            output_len,
        };
        check_request(&r).map_err(err)?;
        if !ids.insert(id) {
            return Err(err(format!("duplicate request id {id}")));
        }
        requests.push(r);
    }
    Trace::new(name, requests)
}

pub fn load_trace(path: &Path) -> Result<Trace> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "trace".into());
    parse_trace(&name, &text)
}

pub fn save_trace(trace: &Trace, path: &Path) -> Result<()> {
    std::fs::write(path, trace.to_text()).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ArrivalMode {
    AllAtZero,
    FixedInterval(f64),
}

impl std::str::FromStr for ArrivalMode {
    type Err = Error;

    /// `all-at-zero` or `interval:<ms>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "all-at-zero" {
            return Ok(ArrivalMode::AllAtZero);
        }
        if let Some(ms) = s.strip_prefix("interval:") {
            let v: f64 = ms
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad interval {ms:?}")))?;
            if v.is_finite() && v >= 0.0 {
                return Ok(ArrivalMode::FixedInterval(v));
            }
        }
        Err(Error::InvalidArgument(format!(
            "arrival mode must be all-at-zero or interval:<ms>, got {s:?}"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub n: usize,
    pub mean_in: f64,
    pub mean_out: f64,
    pub arrival: ArrivalMode,
    pub seed: u64,
    pub sigma_in: f64,
    pub sigma_out: f64,
}

impl SynthParams {
    pub fn new(n: usize, mean_in: f64, mean_out: f64, arrival: ArrivalMode, seed: u64) -> Self {
        SynthParams {
            n,
            mean_in,
            mean_out,
            arrival,
            seed,
            sigma_in: DEFAULT_LENGTH_SIGMA,
            sigma_out: DEFAULT_LENGTH_SIGMA,
        }
    }

    /// Conversation-trace-like workload: 1000 requests, mean 1014 in / 247 out.
    pub fn conversation(arrival: ArrivalMode, seed: u64) -> Self {
        Self::new(1000, 1014.0, 247.0, arrival, seed)
    }
}

/// Lengths drawn from a lognormal truncated to `[1, 16 * mean]`, with the
/// location chosen so the truncated mean equals `mean`.
pub fn synth_trace(p: &SynthParams) -> Result<Trace> {
    if p.n < 1 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    if !(p.mean_in >= 1.0 && p.mean_out >= 1.0) {
        return Err(Error::InvalidArgument("mean lengths must be at least 1".into()));
    }
    if !(p.sigma_in > 0.0 && p.sigma_out > 0.0) {
        return Err(Error::InvalidArgument("sigma must be positive".into()));
    }
    let in_dist = TruncatedLogNormal::with_mean(p.mean_in, p.sigma_in);
    let out_dist = TruncatedLogNormal::with_mean(p.mean_out, p.sigma_out);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let requests = (0..p.n)
        .map(|i| {
            let arrival_time = match p.arrival {
                ArrivalMode::AllAtZero => 0.0,
                ArrivalMode::FixedInterval(ms) => i as f64 * ms,
            };
            Request {
                id: i as u64,
                arrival_time,
                input_len: in_dist.sample_len(&mut rng),
                output_len: out_dist.sample_len(&mut rng),
            }
        })
        .collect();
    let name = format!(
        "synth-n{}-in{}-out{}-s{}",
        p.n, p.mean_in, p.mean_out, p.seed
    );
    Trace::new(name, requests)
}

struct TruncatedLogNormal {
    inner: LogNormal<f64>,
    #[cfg_attr(not(test), allow(dead_code))]
    mu: f64,
    lo: f64,
    hi: f64,
}

impl TruncatedLogNormal {
    fn with_mean(mean: f64, sigma: f64) -> Self {
        let lo = 1.0;
        let hi = TRUNCATION_FACTOR * mean;
        // The truncated mean is increasing in mu; bisect for the target.
        let (mut a, mut b) = (-20.0f64, hi.ln() + 20.0);
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if truncated_mean(mid, sigma, lo, hi) < mean {
                a = mid;
            } else {
                b = mid;
            }
        }
        let mu = 0.5 * (a + b);
        TruncatedLogNormal {
            inner: LogNormal::new(mu, sigma).expect("sigma checked positive"),
            mu,
            lo,
            hi,
        }
    }

    fn sample_len<R: Rng>(&self, rng: &mut R) -> u32 {
        loop {
            let x = self.inner.sample(rng);
            if (self.lo..=self.hi).contains(&x) {
                return (x.round() as u32).max(1);
            }
        }
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn truncated_mean(mu: f64, sigma: f64, lo: f64, hi: f64) -> f64 {
    let (a, b) = (lo.ln(), hi.ln());
    let mass = std_normal_cdf((b - mu) / sigma) - std_normal_cdf((a - mu) / sigma);
    if mass <= 0.0 {
        return if mu < a { lo } else { hi };
    }
    let s2 = sigma * sigma;
    let shifted = std_normal_cdf((b - mu - s2) / sigma) - std_normal_cdf((a - mu - s2) / sigma);
    (mu + s2 / 2.0).exp() * shifted / mass
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_three_lines() {
        let t = parse_trace("t", "0,0,10,5\n1 1.5 20 6\n# note\n2, 3, 30, 7\n").unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.requests[1].arrival_time, 1.5);
        assert_eq!(t.requests[2].input_len, 30);
    }

    #[test]
    fn zero_input_names_line() {
        let err = parse_trace("t", "0,0,10,5\n1,1,0,5\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("input_len must be ≥ 1"), "{msg}");
    }

    #[test]
    fn malformed_line_names_line() {
        let err = parse_trace("t", "# header\n0,0,10\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_trace("t", "0,zero,10,1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn empty_is_error() {
        assert!(matches!(parse_trace("t", "# nothing\n\n"), Err(Error::EmptyTrace)));
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(parse_trace("t", "1,0,1,1\n1,2,1,1\n").is_err());
    }

    #[test]
    fn sorts_stably_by_arrival() {
        let t = parse_trace("t", "0,5,1,1\n1,2,1,1\n2,5,1,1\n3,0,1,1\n").unwrap();
        let ids: Vec<u64> = t.requests.iter().map(|r| r.id).collect();
        assert_eq!(ids, vec![3, 1, 0, 2]);
    }

    #[test]
    fn synth_all_at_zero() {
        let t = synth_trace(&SynthParams::new(5, 100.0, 10.0, ArrivalMode::AllAtZero, 1)).unwrap();
        assert!(t.requests.iter().all(|r| r.arrival_time == 0.0));
    }

    #[test]
    fn synth_fixed_interval() {
        let t = synth_trace(&SynthParams::new(4, 100.0, 10.0, ArrivalMode::FixedInterval(250.0), 1)).unwrap();
        let arrivals: Vec<f64> = t.requests.iter().map(|r| r.arrival_time).collect();
        assert_eq!(arrivals, vec![0.0, 250.0, 500.0, 750.0]);
    }

    #[test]
    fn synth_means_track_targets() {
        let t = synth_trace(&SynthParams::conversation(ArrivalMode::AllAtZero, 7)).unwrap();
        let (mi, mo) = t.mean_lengths();
        assert!((mi / 1014.0 - 1.0).abs() < 0.10, "mean_in {mi}");
        assert!((mo / 247.0 - 1.0).abs() < 0.10, "mean_out {mo}");
        assert!(t.requests.iter().all(|r| r.input_len as f64 <= 16.0 * 1014.0 + 0.5));
    }

    #[test]
    fn truncated_mean_solver_hits_target() {
        for (m, s) in [(1014.0, 0.8), (247.0, 1.2), (3.0, 0.5)] {
            let d = TruncatedLogNormal::with_mean(m, s);
            let got = truncated_mean(d.mu, s, d.lo, d.hi);
            assert!((got - m).abs() < 1e-6 * m, "{m}: {got}");
        }
    }

    #[test]
    fn synth_deterministic() {
        let p = SynthParams::new(200, 500.0, 100.0, ArrivalMode::FixedInterval(3.0), 42);
        assert_eq!(synth_trace(&p).unwrap(), synth_trace(&p).unwrap());
        let q = SynthParams { seed: 43, ..p };
        assert_ne!(synth_trace(&p).unwrap(), synth_trace(&q).unwrap());
    }

    #[test]
    fn arrival_mode_parse() {
        assert_eq!("all-at-zero".parse::<ArrivalMode>().unwrap(), ArrivalMode::AllAtZero);
        assert_eq!(
            "interval:12.5".parse::<ArrivalMode>().unwrap(),
            ArrivalMode::FixedInterval(12.5)
        );
        assert!("sometimes".parse::<ArrivalMode>().is_err());
    }

    proptest! {
        #[test]
        fn text_round_trip(
            reqs in prop::collection::vec((0.0f64..1e7, 1u32..20_000, 1u32..5_000), 1..40)
        ) {
            let requests: Vec<Request> = reqs.iter().enumerate().map(|(i, &(a, li, lo))| Request {
                id: i as u64 * 3 + 1,
                arrival_time: a,
                input_len: li,
                output_len: lo,
            }).collect();
            let t = Trace::new("rt", requests).unwrap();
            let back = parse_trace("rt", &t.to_text()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}

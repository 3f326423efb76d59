use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Agent workflow shape of every request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    /// Thought/action turns, each followed by a tool observation.
    React,
    /// ReAct trials separated by reflection turns over the whole history.
    Reflexion,
}

/// How turns are assigned to agents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// Turn `j` of a request goes to agent `j mod N`.
    RoundRobin,
    /// Agent 0 is drawn with the skew mass, the others uniformly.
    RandomSkewed,
}

macro_rules! named_enum {
    ($ty:ty, $what:literal, $($variant:path => $name:literal),+) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $($variant => $name),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    _ => Err(Error::Mode(format!(
                        concat!("unknown ", $what, " {:?} (expected {})"),
                        s,
                        [$($name),+].join(" or ")
                    ))),
                }
            }
        }
    };
}

named_enum!(Pattern, "pattern", Pattern::React => "react", Pattern::Reflexion => "reflexion");
named_enum!(Routing, "routing", Routing::RoundRobin => "round_robin", Routing::RandomSkewed => "random_skewed");

/// Inclusive integer range sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LenRange {
    pub min: usize,
    pub max: usize,
}

impl LenRange {
    pub const fn fixed(n: usize) -> Self {
        Self { min: n, max: n }
    }

    pub const fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    fn sample(self, rng: &mut ChaCha8Rng) -> usize {
        rng.random_range(self.min..=self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub pattern: Pattern,
    pub num_agents: usize,
    pub routing: Routing,
    /// Probability of the hot agent under `random_skewed`.
    pub skew: f64,
    pub qps: f64,
    pub requests: usize,
    /// System prompt shared by every request.
    pub system_len: usize,
    /// Request-specific task text opening each request.
    pub input_len: LenRange,
    /// Tokens generated per turn.
    pub output_len: LenRange,
    /// Tool observation appended after each action turn.
    pub observation_len: LenRange,
    /// Action turns per trial.
    pub turns: LenRange,
    /// Reflexion: trials per request, and the reflection instruction length.
    pub trials: usize,
    pub reflection_len: LenRange,
    /// Simulated seconds between a turn's completion and the next turn.
    pub tool_latency: f64,
    /// Drop a request's context from the cache when it completes; only the
    /// shared system prompt outlives its workflow.
    pub retire_finished: bool,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            pattern: Pattern::React,
            num_agents: 8,
            routing: Routing::RoundRobin,
            skew: 0.5,
            qps: 0.2,
            requests: 128,
            system_len: 64,
            input_len: LenRange::new(64, 192),
            output_len: LenRange::new(16, 48),
            observation_len: LenRange::new(32, 96),
            turns: LenRange::new(4, 12),
            trials: 2,
            reflection_len: LenRange::new(16, 32),
            tool_latency: 0.5,
            retire_finished: true,
            vocab_size: 256,
            seed: 0,
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_agents == 0 {
            return fail("a workload needs at least one agent");
        }
        if !(0.0..=1.0).contains(&self.skew) {
            return fail("skew mass must lie in [0, 1]");
        }
        if !(self.qps > 0.0) || !self.qps.is_finite() {
            return fail("qps must be positive");
        }
        if !(self.tool_latency >= 0.0) {
            return fail("tool latency must be non-negative");
        }
        let ranges = [
            self.input_len,
            self.output_len,
            self.observation_len,
            self.turns,
            self.reflection_len,
        ];
        if ranges.iter().any(|r| r.min > r.max) {
            return fail("every length range needs min <= max");
        }
        if self.output_len.min == 0 || self.turns.min == 0 || self.trials == 0 {
            return fail("output length, turns and trials must be at least 1");
        }
        if self.system_len + self.input_len.min == 0 {
            return fail("the first prompt of a request must not be empty");
        }
        if self.vocab_size <= FIRST_TOKEN {
            return fail("vocabulary too small for workload tokens");
        }
        Ok(())
    }
}

const FIRST_TOKEN: usize = 2;
const ARRIVAL_STREAM: u64 = 1;
const ROUTING_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnKind {
    Act,
    Reflect,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub agent: usize,
    pub kind: TurnKind,
    /// Tokens appended to the context before this turn runs.
    pub append: Vec<usize>,
    /// Tokens the turn generates.
    pub output: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: usize,
    pub arrival: f64,
    pub turns: Vec<Turn>,
}

/// A deterministic set of requests. Token content and routing do not
/// depend on the arrival rate.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadTrace {
    pub config: WorkloadConfig,
    pub system: Vec<usize>,
    pub requests: Vec<Request>,
}

impl WorkloadTrace {
    pub fn total_turns(&self) -> usize {
        self.requests.iter().map(|r| r.turns.len()).sum()
    }

    /// Agent of every turn in request order.
    pub fn agent_sequence(&self) -> Vec<usize> {
        self.requests
            .iter()
            .flat_map(|r| r.turns.iter().map(|t| t.agent))
            .collect()
    }

    /// Prompt of turn `turn` of request `req`: the system prompt and every
    /// earlier append and output, then this turn's append.
    pub fn prompt(&self, req: usize, turn: usize) -> Vec<usize> {
        let r = &self.requests[req];
        let mut ctx = self.system.clone();
        for t in &r.turns[..turn] {
            ctx.extend(&t.append);
            ctx.extend(&t.output);
        }
        ctx.extend(&r.turns[turn].append);
        ctx
    }
}

/// Build the requests of `config`.
pub fn generate_workload(config: &WorkloadConfig) -> Result<WorkloadTrace> {
    config.validate()?;
    let mut content = ChaCha8Rng::seed_from_u64(config.seed);
    let mut arrivals = ChaCha8Rng::seed_from_u64(config.seed);
    arrivals.set_stream(ARRIVAL_STREAM);
    let mut routing = ChaCha8Rng::seed_from_u64(config.seed);
    routing.set_stream(ROUTING_STREAM);
    let gap = Exp::new(config.qps).map_err(|e| Error::Config(e.to_string()))?;
    let vocab = config.vocab_size;
    let tokens = |rng: &mut ChaCha8Rng, n: usize| -> Vec<usize> {
        (0..n).map(|_| rng.random_range(FIRST_TOKEN..vocab)).collect()
    };
    let system = tokens(&mut content, config.system_len);
    let mut clock = 0.0;
    let mut requests = Vec::with_capacity(config.requests);
    for id in 0..config.requests {
        clock += gap.sample(&mut arrivals);
        let t = config.turns.sample(&mut content);
        let trials = match config.pattern {
            Pattern::React => 1,
            Pattern::Reflexion => config.trials,
        };
        let mut kinds = Vec::new();
        for trial in 0..trials {
            kinds.extend(std::iter::repeat_n(TurnKind::Act, t));
            if trial + 1 < trials {
                kinds.push(TurnKind::Reflect);
            }
        }
        let mut turns = Vec::with_capacity(kinds.len());
        let mut prev = None;
        for (j, kind) in kinds.into_iter().enumerate() {
            let append_len = match (j, kind, prev) {
                (0, _, _) => config.input_len.sample(&mut content),
                (_, TurnKind::Reflect, _) => config.reflection_len.sample(&mut content),
                // the observation answers the previous action
                (_, TurnKind::Act, Some(TurnKind::Act)) => config.observation_len.sample(&mut content),
                (_, TurnKind::Act, _) => 0,
            };
            let append = tokens(&mut content, append_len);
            let output_len = config.output_len.sample(&mut content);
            let output = tokens(&mut content, output_len);
            let agent = match config.routing {
                Routing::RoundRobin => j % config.num_agents,
                Routing::RandomSkewed => skewed_agent(&mut routing, config.num_agents, config.skew),
            };
            turns.push(Turn {
                agent,
                kind,
                append,
                output,
            });
            prev = Some(kind);
        }
        requests.push(Request {
            id,
            arrival: clock,
            turns,
        });
    }
    Ok(WorkloadTrace {
        config: config.clone(),
        system,
        requests,
    })
}

fn skewed_agent(rng: &mut ChaCha8Rng, n: usize, skew: f64) -> usize {
    if n == 1 || rng.random_bool(skew) {
        0
    } else {
        rng.random_range(1..n)
    }
}

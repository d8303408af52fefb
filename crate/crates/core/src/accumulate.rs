//! Bit-exact `p`-bit accumulation of integer dot products.
//!
//! Partial products are always exact (`i64`); running sums are carried in `i128` so the true
//! value is known at every step and the `p`-bit register semantics (exact, saturating, or
//! wrapping) are applied on top. Loading the first value into an empty register counts as an
//! accumulation step, so a single out-of-range product is already an overflow event.
//!
//! The sorted dot product cancels large positive and negative partial products before they
//! can build up:
//!
//! 1. drop zero products and split the rest by sign,
//! 2. sort positives descending and negatives ascending (most negative first),
//! 3. add the two lists pairwise, carrying the unpaired tail of the longer one,
//! 4. repeat until one value is left or every value has the same sign, then sum sequentially.
//!
//! Every pairwise sum and every running sum of the final sequential phase is range-checked.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_ACCUM_BITS: u32 = 4;
pub const MAX_ACCUM_BITS: u32 = 64;
pub const DEFAULT_MAX_SORT_ROUNDS: usize = 8;

/// Largest product list [`exists_safe_order`] will search.
pub const SAFE_ORDER_MAX_LEN: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum AccumError {
    #[error("accumulator bitwidth {0} outside [{MIN_ACCUM_BITS}, {MAX_ACCUM_BITS}]")]
    InvalidBits(u32),
    #[error("tile length must be at least 1")]
    ZeroTile,
    #[error("length mismatch: {0} weights vs {1} activations")]
    LengthMismatch(usize, usize),
    #[error("evaluation order is not a permutation of 0..{0}")]
    InvalidOrder(usize),
    #[error("{0} products exceed the exhaustive search budget of {SAFE_ORDER_MAX_LEN}")]
    SearchTooLarge(usize),
    #[error("unknown policy `{0}`")]
    UnknownPolicy(String),
}

/// Register arithmetic applied after every addition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arith {
    /// Keep the true value; overflows are only logged.
    Exact,
    /// Clamp into the signed range.
    Saturate,
    /// Two's-complement wraparound.
    Wrap,
}

/// How a dot product is accumulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Policy {
    Exact,
    Saturate,
    Wrap,
    /// Sorted dot product; the exact result is reported and overflows are logged.
    Sorted,
    /// Sorted dot product on a saturating register.
    SortedSaturate,
    /// Sorted dot product over contiguous tiles, then over the tile results.
    SortedTiled { tile: usize },
    /// Saturate, but redo a dot product on a wide register when its overflows are all transient.
    ResolveTransients,
}

impl Policy {
    pub fn name(&self) -> String {
        self.to_string()
    }

    /// Arithmetic used when this policy accumulates along an explicit order.
    pub fn arith(&self) -> Arith {
        match self {
            Policy::Exact | Policy::Sorted | Policy::SortedTiled { .. } => Arith::Exact,
            Policy::Saturate | Policy::SortedSaturate | Policy::ResolveTransients => Arith::Saturate,
            Policy::Wrap => Arith::Wrap,
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Exact => f.write_str("exact"),
            Policy::Saturate => f.write_str("saturate"),
            Policy::Wrap => f.write_str("wrap"),
            Policy::Sorted => f.write_str("sorted"),
            Policy::SortedSaturate => f.write_str("sorted-saturate"),
            Policy::SortedTiled { tile } => write!(f, "sorted-tiled-{tile}"),
            Policy::ResolveTransients => f.write_str("resolve-transients"),
        }
    }
}

impl FromStr for Policy {
    type Err = AccumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "exact" => Policy::Exact,
            "saturate" => Policy::Saturate,
            "wrap" => Policy::Wrap,
            "sorted" => Policy::Sorted,
            "sorted-saturate" => Policy::SortedSaturate,
            "resolve-transients" => Policy::ResolveTransients,
            other => {
                let tile = other
                    .strip_prefix("sorted-tiled-")
                    .and_then(|k| k.parse::<usize>().ok())
                    .ok_or_else(|| AccumError::UnknownPolicy(other.to_string()))?;
                if tile == 0 {
                    return Err(AccumError::ZeroTile);
                }
                Policy::SortedTiled { tile }
            }
        })
    }
}

impl TryFrom<String> for Policy {
    type Error = AccumError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Policy> for String {
    fn from(p: Policy) -> Self {
        p.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccumConfig {
    bits: u32,
    policy: Policy,
    max_sort_rounds: usize,
}

impl AccumConfig {
    pub fn new(bits: u32, policy: Policy) -> Result<Self, AccumError> {
        Self::with_rounds(bits, policy, DEFAULT_MAX_SORT_ROUNDS)
    }

    pub fn with_rounds(bits: u32, policy: Policy, max_sort_rounds: usize) -> Result<Self, AccumError> {
        if !(MIN_ACCUM_BITS..=MAX_ACCUM_BITS).contains(&bits) {
            return Err(AccumError::InvalidBits(bits));
        }
        if let Policy::SortedTiled { tile: 0 } = policy {
            return Err(AccumError::ZeroTile);
        }
        Ok(Self { bits, policy, max_sort_rounds })
    }

    /// Overflow-free configuration for training and reference runs.
    pub fn wide() -> Self {
        Self { bits: MAX_ACCUM_BITS, policy: Policy::Exact, max_sort_rounds: DEFAULT_MAX_SORT_ROUNDS }
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn max_sort_rounds(&self) -> usize {
        self.max_sort_rounds
    }

    pub fn with_policy(self, policy: Policy) -> Result<Self, AccumError> {
        Self::with_rounds(self.bits, policy, self.max_sort_rounds)
    }

    pub fn with_bits(self, bits: u32) -> Result<Self, AccumError> {
        Self::with_rounds(bits, self.policy, self.max_sort_rounds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OverflowKind {
    PositiveOverflow,
    NegativeOverflow,
}

/// A running value that left the register range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccumEvent {
    /// Index of the accumulation step in evaluation order.
    pub position: usize,
    /// True value before clamping or wrapping.
    pub value: i128,
    pub kind: OverflowKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OverflowClass {
    None,
    Transient,
    Persistent,
}

/// Where overflow events go. `Vec` keeps them; [`EventCount`] only counts.
pub trait EventSink {
    fn record(&mut self, event: AccumEvent);
}

impl EventSink for Vec<AccumEvent> {
    fn record(&mut self, event: AccumEvent) {
        self.push(event);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EventCount(pub usize);

impl EventSink for EventCount {
    #[inline]
    fn record(&mut self, _event: AccumEvent) {
        self.0 += 1;
    }
}

/// A `bits`-wide signed register with fixed overflow arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Register {
    bits: u32,
    lo: i128,
    hi: i128,
    arith: Arith,
}

impl Register {
    pub fn new(bits: u32, arith: Arith) -> Self {
        assert!((1..=64).contains(&bits), "register width {bits} unsupported");
        Self { bits, lo: -(1i128 << (bits - 1)), hi: (1i128 << (bits - 1)) - 1, arith }
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn range(&self) -> (i128, i128) {
        (self.lo, self.hi)
    }

    #[inline]
    pub fn fits(&self, v: i128) -> bool {
        v >= self.lo && v <= self.hi
    }

    /// Brings a freshly computed value into the register, logging it if it left the range.
    #[inline]
    pub fn settle<S: EventSink>(&self, v: i128, position: usize, sink: &mut S) -> i128 {
        if self.fits(v) {
            return v;
        }
        let kind = if v > self.hi {
            OverflowKind::PositiveOverflow
        } else {
            OverflowKind::NegativeOverflow
        };
        sink.record(AccumEvent { position, value: v, kind });
        match self.arith {
            Arith::Exact => v,
            Arith::Saturate => v.clamp(self.lo, self.hi),
            Arith::Wrap => wrap_to_bits(v, self.bits),
        }
    }
}

/// `v` reduced modulo `2^bits` into the signed range.
pub fn wrap_to_bits(v: i128, bits: u32) -> i128 {
    let modulus = 1i128 << bits;
    let lo = -(1i128 << (bits - 1));
    (v - lo).rem_euclid(modulus) + lo
}

/// Exact products and sums of one dot product.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DotTrace {
    pub products: Vec<i64>,
    pub exact_sum: i128,
    /// Running sums in the order they were evaluated.
    pub running: Vec<i128>,
    pub events: Vec<AccumEvent>,
}

/// Exact integer dot product with left-to-right running sums. No register is involved.
pub fn dot_exact(w: &[i32], x: &[i32]) -> Result<DotTrace, AccumError> {
    if w.len() != x.len() {
        return Err(AccumError::LengthMismatch(w.len(), x.len()));
    }
    let products: Vec<i64> = w.iter().zip(x).map(|(&a, &b)| i64::from(a) * i64::from(b)).collect();
    let mut acc = 0i128;
    let running = products
        .iter()
        .map(|&p| {
            acc += i128::from(p);
            acc
        })
        .collect();
    Ok(DotTrace { products, exact_sum: acc, running, events: Vec::new() })
}

/// Result of accumulating along an explicit order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Accumulation {
    pub value: i128,
    pub running: Vec<i128>,
    pub events: Vec<AccumEvent>,
}

fn check_order(order: &[usize], len: usize) -> Result<(), AccumError> {
    if order.len() != len {
        return Err(AccumError::InvalidOrder(len));
    }
    let mut seen = vec![false; len];
    for &i in order {
        if i >= len || std::mem::replace(&mut seen[i], true) {
            return Err(AccumError::InvalidOrder(len));
        }
    }
    Ok(())
}

/// Sequential accumulation along `order` (natural order when `None`) using the register
/// arithmetic of `cfg`'s policy. Sorted policies accumulate exactly along the given order.
pub fn accumulate(products: &[i64], cfg: &AccumConfig, order: Option<&[usize]>) -> Result<Accumulation, AccumError> {
    if let Some(order) = order {
        check_order(order, products.len())?;
    }
    let reg = Register::new(cfg.bits(), cfg.policy().arith());
    let mut events = Vec::new();
    let mut running = Vec::with_capacity(products.len());
    let mut acc = 0i128;
    for step in 0..products.len() {
        let idx = order.map_or(step, |o| o[step]);
        let v = i128::from(products[idx]);
        let raw = if step == 0 { v } else { acc + v };
        acc = reg.settle(raw, step, &mut events);
        running.push(acc);
    }
    Ok(Accumulation { value: acc, running, events })
}

/// Straight-line accumulation on an arbitrary register, counting events only.
#[inline]
pub fn accumulate_natural<S: EventSink>(products: &[i64], reg: &Register, sink: &mut S) -> i128 {
    let mut acc = 0i128;
    for (step, &p) in products.iter().enumerate() {
        let raw = if step == 0 { i128::from(p) } else { acc + i128::from(p) };
        acc = reg.settle(raw, step, sink);
    }
    acc
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    value: i128,
    /// Already range-checked as the output of an accumulation step.
    settled: bool,
}

/// Outcome of a sorted (optionally tiled) dot product.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SortedOutcome {
    pub value: i128,
    pub events: Vec<AccumEvent>,
    /// Pairing rounds used (summed over tiles and the cross-tile pass when tiled).
    pub rounds: usize,
    /// Per-tile results; empty for the untiled algorithm.
    pub tile_results: Vec<i128>,
    /// Value lists at the start of each pairing round and of the final sequential phase.
    pub states: Vec<Vec<i128>>,
}

struct SortedRun<'a, S: EventSink> {
    reg: Register,
    max_rounds: usize,
    position: usize,
    sink: &'a mut S,
    states: Option<&'a mut Vec<Vec<i128>>>,
}

impl<S: EventSink> SortedRun<'_, S> {
    fn run(&mut self, mut vals: Vec<Slot>) -> (i128, usize) {
        let mut rounds = 0;
        let mut pos: Vec<Slot> = Vec::with_capacity(vals.len());
        let mut neg: Vec<Slot> = Vec::with_capacity(vals.len());
        vals.retain(|s| s.value != 0);
        while vals.len() > 1 && rounds < self.max_rounds {
            pos.clear();
            neg.clear();
            for s in &vals {
                if s.value > 0 {
                    pos.push(*s);
                } else if s.value < 0 {
                    neg.push(*s);
                }
            }
            if pos.is_empty() || neg.is_empty() {
                break;
            }
            if let Some(states) = self.states.as_deref_mut() {
                states.push(vals.iter().map(|s| s.value).collect());
            }
            pos.sort_by_key(|s| std::cmp::Reverse(s.value));
            neg.sort_by_key(|s| s.value);
            let m = pos.len().min(neg.len());
            vals.clear();
            for (p, n) in pos.iter().zip(&neg) {
                let v = self.reg.settle(p.value + n.value, self.position, self.sink);
                self.position += 1;
                vals.push(Slot { value: v, settled: true });
            }
            let rest = if pos.len() > m { &pos[m..] } else { &neg[m..] };
            vals.extend_from_slice(rest);
            vals.retain(|s| s.value != 0);
            rounds += 1;
        }
        if let Some(states) = self.states.as_deref_mut() {
            states.push(vals.iter().map(|s| s.value).collect());
        }
        let mut acc = 0i128;
        for (i, s) in vals.iter().enumerate() {
            if i == 0 {
                acc = s.value;
                if s.settled {
                    continue;
                }
            } else {
                acc += s.value;
            }
            acc = self.reg.settle(acc, self.position, self.sink);
            self.position += 1;
        }
        (acc, rounds)
    }
}

fn sorted_arith(policy: Policy) -> Arith {
    match policy {
        Policy::SortedSaturate => Arith::Saturate,
        _ => Arith::Exact,
    }
}

fn raw_slots(products: &[i64]) -> Vec<Slot> {
    products.iter().map(|&p| Slot { value: i128::from(p), settled: false }).collect()
}

/// Sorted dot product on the register described by `cfg`.
///
/// `Policy::SortedSaturate` clamps every intermediate value; any other policy keeps exact
/// values and only logs overflows.
pub fn sorted_dot(products: &[i64], cfg: &AccumConfig) -> SortedOutcome {
    let mut events = Vec::new();
    let mut states = Vec::new();
    let (value, rounds) = sorted_into(products, cfg, &mut events, Some(&mut states));
    SortedOutcome { value, events, rounds, tile_results: Vec::new(), states }
}

/// [`sorted_dot`] writing events into any sink; returns `(value, rounds)`.
pub fn sorted_into<S: EventSink>(
    products: &[i64],
    cfg: &AccumConfig,
    sink: &mut S,
    states: Option<&mut Vec<Vec<i128>>>,
) -> (i128, usize) {
    let mut run = SortedRun {
        reg: Register::new(cfg.bits(), sorted_arith(cfg.policy())),
        max_rounds: cfg.max_sort_rounds(),
        position: 0,
        sink,
        states,
    };
    run.run(raw_slots(products))
}

/// Tiled sorted dot product: each contiguous tile of `tile` products is reduced with the sorted
/// algorithm, then the tile results are reduced the same way.
pub fn sorted_dot_tiled(products: &[i64], cfg: &AccumConfig, tile: usize) -> Result<SortedOutcome, AccumError> {
    let mut events = Vec::new();
    let (value, rounds, tile_results) = sorted_tiled_into(products, cfg, tile, &mut events)?;
    Ok(SortedOutcome { value, events, rounds, tile_results, states: Vec::new() })
}

pub fn sorted_tiled_into<S: EventSink>(
    products: &[i64],
    cfg: &AccumConfig,
    tile: usize,
    sink: &mut S,
) -> Result<(i128, usize, Vec<i128>), AccumError> {
    if tile == 0 {
        return Err(AccumError::ZeroTile);
    }
    let mut run = SortedRun {
        reg: Register::new(cfg.bits(), sorted_arith(cfg.policy())),
        max_rounds: cfg.max_sort_rounds(),
        position: 0,
        sink,
        states: None,
    };
    let mut rounds = 0;
    let tile_results: Vec<i128> = products
        .chunks(tile)
        .map(|chunk| {
            let (v, r) = run.run(raw_slots(chunk));
            rounds += r;
            v
        })
        .collect();
    let value = match tile_results.len() {
        0 => 0,
        1 => tile_results[0],
        _ => {
            let slots = tile_results.iter().map(|&v| Slot { value: v, settled: true }).collect();
            let (v, r) = run.run(slots);
            rounds += r;
            v
        }
    };
    Ok((value, rounds, tile_results))
}

/// Persistent when the exact sum does not fit `bits`; otherwise transient when the given order
/// (natural when `None`) overflows along the way.
pub fn classify(trace: &DotTrace, bits: u32, order: Option<&[usize]>) -> Result<OverflowClass, AccumError> {
    let reg = Register::new(bits, Arith::Exact);
    if !reg.fits(trace.exact_sum) {
        return Ok(OverflowClass::Persistent);
    }
    let events = match order {
        None => {
            let mut count = EventCount::default();
            accumulate_natural(&trace.products, &reg, &mut count);
            count.0
        }
        Some(order) => {
            check_order(order, trace.products.len())?;
            let reordered: Vec<i64> = order.iter().map(|&i| trace.products[i]).collect();
            let mut count = EventCount::default();
            accumulate_natural(&reordered, &reg, &mut count);
            count.0
        }
    };
    Ok(class_from(true, events))
}

/// Combines "final value fits" with an event count into a class.
#[inline]
pub fn class_from(final_fits: bool, events: usize) -> OverflowClass {
    if !final_fits {
        OverflowClass::Persistent
    } else if events > 0 {
        OverflowClass::Transient
    } else {
        OverflowClass::None
    }
}

/// Exhaustive search for an order whose every running sum (including the first load) fits
/// `bits`. Prefixes are abandoned as soon as they overflow; no other shortcut is taken.
pub fn exists_safe_order(products: &[i64], bits: u32) -> Result<bool, AccumError> {
    if products.len() > SAFE_ORDER_MAX_LEN {
        return Err(AccumError::SearchTooLarge(products.len()));
    }
    let reg = Register::new(bits, Arith::Exact);
    fn search(products: &[i64], used: &mut [bool], depth: usize, acc: i128, reg: &Register) -> bool {
        if depth == products.len() {
            return true;
        }
        for i in 0..products.len() {
            if used[i] {
                continue;
            }
            let next = acc + i128::from(products[i]);
            if !reg.fits(next) {
                continue;
            }
            used[i] = true;
            let found = search(products, used, depth + 1, next, reg);
            used[i] = false;
            if found {
                return true;
            }
        }
        false
    }
    let mut used = vec![false; products.len()];
    Ok(search(products, &mut used, 0, 0, &reg))
}

/// L1 budget on integer weights that keeps every partial sum inside `p` bits against
/// worst-case activations of magnitude `2^(b-1)`: `(2^(p-1) - 1) / 2^(b-1)`.
pub fn a2q_l1_bound(b: u32, p: u32) -> f64 {
    ((2f64).powi(p as i32 - 1) - 1.0) / (2f64).powi(b as i32 - 1)
}

/// Dot-product length at which `b`-bit operands may overflow a `p`-bit accumulator:
/// `2^(p - 2b)`, or 1 when `p <= 2b`.
pub fn overflow_threshold(b: u32, p: u32) -> u64 {
    if p > 2 * b {
        1u64 << (p - 2 * b)
    } else {
        1
    }
}

/// Everything the network layers need from one dot product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DotOutcome {
    /// Value produced under the configured policy.
    pub value: i128,
    /// True sum.
    pub exact: i128,
    /// Classification against the natural (index) order.
    pub class: OverflowClass,
    /// Events logged while evaluating under the configured policy.
    pub events: usize,
}

/// Evaluates one dot product under `cfg`, classifying it against the natural order.
pub fn evaluate_products(products: &[i64], cfg: &AccumConfig) -> DotOutcome {
    let bits = cfg.bits();
    let exact_reg = Register::new(bits, Arith::Exact);
    let mut natural = EventCount::default();
    let policy = cfg.policy();
    match policy {
        Policy::Exact | Policy::Saturate | Policy::Wrap | Policy::ResolveTransients => {
            let reg = Register::new(bits, policy.arith());
            let mut policy_events = EventCount::default();
            let mut exact = 0i128;
            let mut acc = 0i128;
            for (step, &p) in products.iter().enumerate() {
                let p = i128::from(p);
                let (raw_exact, raw) = if step == 0 { (p, p) } else { (exact + p, acc + p) };
                exact = exact_reg.settle(raw_exact, step, &mut natural);
                acc = reg.settle(raw, step, &mut policy_events);
            }
            let class = class_from(exact_reg.fits(exact), natural.0);
            match policy {
                Policy::Exact => DotOutcome { value: exact, exact, class, events: natural.0 },
                Policy::ResolveTransients if class == OverflowClass::Transient => {
                    DotOutcome { value: exact, exact, class, events: 0 }
                }
                _ => DotOutcome { value: acc, exact, class, events: policy_events.0 },
            }
        }
        Policy::Sorted | Policy::SortedSaturate | Policy::SortedTiled { .. } => {
            let exact = accumulate_natural(products, &exact_reg, &mut natural);
            let class = class_from(exact_reg.fits(exact), natural.0);
            let mut events = EventCount::default();
            let value = match policy {
                Policy::SortedTiled { tile } => {
                    sorted_tiled_into(products, cfg, tile, &mut events)
                        .expect("tile validated by AccumConfig")
                        .0
                }
                _ => sorted_into(products, cfg, &mut events, None).0,
            };
            DotOutcome { value, exact, class, events: events.0 }
        }
    }
}

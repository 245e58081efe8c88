//! Word lattices: an acyclic graph whose arcs carry a word, an acoustic
//! score and a first-pass LM score (natural-log, higher is better).
//!
//! State 0 is the start state. Text format, one lattice per block:
//!
//! ```text
//! UTT utt-001
//! 0 1 hello -1.0 -2.0
//! 1 2 world am=-0.5 lm=-1.5
//! F 2
//! ```
//!
//! A blank line ends a block, `;` also separates lines, and `final s` is
//! accepted for `F s`. Scores are written in shortest round-trip form so a
//! written lattice parses back bit-exactly.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::cmp::Reverse;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{Vocabulary, EOS, NUM_RESERVED};
use crate::ngram::NgramModel;

#[derive(Debug, Error, PartialEq)]
pub enum LatticeError {
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("arc refers to state {state} but the lattice has {num_states} states")]
    BadState { state: usize, num_states: usize },
    #[error("cycle through state {0}")]
    Cycle(usize),
    #[error("state {0} is not on any complete path")]
    Dangling(usize),
    #[error("unknown word `{0}`")]
    UnknownWord(String),
    #[error("word id {0} is not a lattice word")]
    BadWord(usize),
    #[error("lattice has no final state")]
    NoFinal,
    #[error("no final state is reachable from the start")]
    NoPath,
    #[error("lattice has {count} paths, more than the limit {limit}")]
    TooManyPaths { count: u128, limit: usize },
    #[error("final states must not have outgoing arcs")]
    FinalWithArcs,
    #[error("empty reference")]
    EmptyReference,
}

pub type Result<T> = std::result::Result<T, LatticeError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Arc {
    pub src: usize,
    pub dst: usize,
    pub word: usize,
    pub am: f64,
    pub lm: f64,
}

impl Arc {
    pub fn score(&self, acoustic_scale: f64) -> f64 {
        acoustic_scale * self.am + self.lm
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    pub id: String,
    num_states: usize,
    arcs: Vec<Arc>,
    finals: Vec<bool>,
    out: Vec<Vec<usize>>,
    topo: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatticePath {
    pub arcs: Vec<usize>,
    pub states: Vec<usize>,
    pub words: Vec<usize>,
    pub am: f64,
    pub lm: f64,
}

impl LatticePath {
    fn empty() -> Self {
        LatticePath { arcs: Vec::new(), states: vec![0], words: Vec::new(), am: 0.0, lm: 0.0 }
    }

    fn extend(&self, index: usize, arc: &Arc) -> Self {
        let mut p = self.clone();
        p.arcs.push(index);
        p.states.push(arc.dst);
        p.words.push(arc.word);
        p.am += arc.am;
        p.lm += arc.lm;
        p
    }

    /// Sum of `acoustic_scale * am + lm` over the arcs, in path order.
    pub fn score(&self, lattice: &Lattice, acoustic_scale: f64) -> f64 {
        self.arcs.iter().fold(0.0, |acc, &a| acc + lattice.arcs[a].score(acoustic_scale))
    }
}

/// Ordering used for every argmax: higher score first, then the
/// lexicographically smaller state sequence, then smaller arc indices.
pub fn better(score_a: f64, states_a: &[usize], arcs_a: &[usize], score_b: f64, states_b: &[usize], arcs_b: &[usize]) -> bool {
    match score_a.partial_cmp(&score_b) {
        Some(Ordering::Greater) => true,
        Some(Ordering::Less) => false,
        _ => (states_a, arcs_a) < (states_b, arcs_b),
    }
}

impl Lattice {
    /// Builds a lattice, checking state indices and acyclicity. States off
    /// every complete path are allowed; see [`Lattice::trim`].
    pub fn from_parts(id: impl Into<String>, num_states: usize, arcs: Vec<Arc>, finals: &[usize]) -> Result<Self> {
        if num_states == 0 {
            return Err(LatticeError::NoFinal);
        }
        let mut is_final = vec![false; num_states];
        for &f in finals {
            if f >= num_states {
                return Err(LatticeError::BadState { state: f, num_states });
            }
            is_final[f] = true;
        }
        if finals.is_empty() {
            return Err(LatticeError::NoFinal);
        }
        let mut out = vec![Vec::new(); num_states];
        for (i, a) in arcs.iter().enumerate() {
            for s in [a.src, a.dst] {
                if s >= num_states {
                    return Err(LatticeError::BadState { state: s, num_states });
                }
            }
            out[a.src].push(i);
        }
        let topo = topological_order(num_states, &arcs)?;
        Ok(Lattice { id: id.into(), num_states, arcs, finals: is_final, out, topo })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn arcs(&self) -> &[Arc] {
        &self.arcs
    }

    pub fn arc(&self, index: usize) -> &Arc {
        &self.arcs[index]
    }

    /// Indices of the arcs leaving `state`, in ascending order.
    pub fn out_arcs(&self, state: usize) -> &[usize] {
        &self.out[state]
    }

    pub fn is_final(&self, state: usize) -> bool {
        self.finals[state]
    }

    pub fn finals(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_states).filter(|&s| self.finals[s])
    }

    /// States in topological order; ties broken by smaller index.
    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    fn live_states(&self) -> Vec<bool> {
        let mut fwd = vec![false; self.num_states];
        fwd[0] = true;
        for &s in &self.topo {
            if fwd[s] {
                for &a in &self.out[s] {
                    fwd[self.arcs[a].dst] = true;
                }
            }
        }
        let mut bwd = self.finals.clone();
        for &s in self.topo.iter().rev() {
            if self.out[s].iter().any(|&a| bwd[self.arcs[a].dst]) {
                bwd[s] = true;
            }
        }
        fwd.iter().zip(&bwd).map(|(a, b)| *a && *b).collect()
    }

    pub fn is_trimmed(&self) -> bool {
        self.live_states().iter().all(|&l| l)
    }

    /// Removes states that are unreachable from the start or cannot reach a
    /// final state, renumbering the rest in their original order.
    pub fn trim(&self) -> Result<Lattice> {
        let live = self.live_states();
        if !live[0] {
            return Err(LatticeError::NoPath);
        }
        let mut map = vec![usize::MAX; self.num_states];
        let mut n = 0;
        for s in 0..self.num_states {
            if live[s] {
                map[s] = n;
                n += 1;
            }
        }
        let arcs = self
            .arcs
            .iter()
            .filter(|a| live[a.src] && live[a.dst])
            .map(|a| Arc { src: map[a.src], dst: map[a.dst], ..*a })
            .collect();
        let finals: Vec<usize> = self.finals().filter(|&s| live[s]).map(|s| map[s]).collect();
        Lattice::from_parts(self.id.clone(), n, arcs, &finals)
    }

    /// Every arc word must be an ordinary vocabulary word (no sentinels).
    pub fn check_words(&self, vocab_size: usize) -> Result<()> {
        match self.arcs.iter().find(|a| a.word < NUM_RESERVED || a.word >= vocab_size) {
            Some(a) => Err(LatticeError::BadWord(a.word)),
            None => Ok(()),
        }
    }

    /// Number of complete paths, saturating at `u128::MAX`.
    pub fn path_count(&self) -> u128 {
        let mut count = vec![0u128; self.num_states];
        count[0] = 1;
        let mut total = 0u128;
        for &s in &self.topo {
            if self.finals[s] {
                total = total.saturating_add(count[s]);
            }
            for &a in &self.out[s] {
                let d = self.arcs[a].dst;
                count[d] = count[d].saturating_add(count[s]);
            }
        }
        total
    }

    /// All complete paths in depth-first order (arcs in index order).
    pub fn enumerate_paths(&self, limit: usize) -> Result<Vec<LatticePath>> {
        let count = self.path_count();
        if count > limit as u128 {
            return Err(LatticeError::TooManyPaths { count, limit });
        }
        let mut out = Vec::with_capacity(count as usize);
        let mut stack = vec![LatticePath::empty()];
        while let Some(p) = stack.pop() {
            let s = *p.states.last().expect("paths start at state 0");
            if self.finals[s] {
                out.push(p.clone());
            }
            for &a in self.out[s].iter().rev() {
                stack.push(p.extend(a, &self.arcs[a]));
            }
        }
        Ok(out)
    }

    /// Best path under `acoustic_scale * am + lm`, ties going to the
    /// lexicographically smallest state sequence.
    pub fn first_pass_best(&self, acoustic_scale: f64) -> Result<LatticePath> {
        let mut best: Vec<Option<(f64, LatticePath)>> = vec![None; self.num_states];
        best[0] = Some((0.0, LatticePath::empty()));
        let mut answer: Option<(f64, LatticePath)> = None;
        for &s in &self.topo {
            let Some((score, path)) = best[s].clone() else { continue };
            if self.finals[s] && answer.as_ref().is_none_or(|(b, bp)| better(score, &path.states, &path.arcs, *b, &bp.states, &bp.arcs)) {
                answer = Some((score, path.clone()));
            }
            for &a in &self.out[s] {
                let arc = &self.arcs[a];
                let cand_score = score + arc.score(acoustic_scale);
                let cand = path.extend(a, arc);
                let slot = &mut best[arc.dst];
                if slot
                    .as_ref()
                    .is_none_or(|(b, bp)| better(cand_score, &cand.states, &cand.arcs, *b, &bp.states, &bp.arcs))
                {
                    *slot = Some((cand_score, cand));
                }
            }
        }
        answer.map(|(_, p)| p).ok_or(LatticeError::NoPath)
    }

    pub fn to_text(&self, vocab: &Vocabulary) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "UTT {}", self.id);
        for a in &self.arcs {
            let _ = writeln!(s, "{} {} {} {:?} {:?}", a.src, a.dst, vocab.word(a.word), a.am, a.lm);
        }
        for f in self.finals() {
            let _ = writeln!(s, "F {f}");
        }
        s.push('\n');
        s
    }
}

/// Kahn's algorithm with a min-heap, so the order is deterministic.
fn topological_order(num_states: usize, arcs: &[Arc]) -> Result<Vec<usize>> {
    let mut indegree = vec![0usize; num_states];
    let mut succ = vec![Vec::new(); num_states];
    for a in arcs {
        indegree[a.dst] += 1;
        succ[a.src].push(a.dst);
    }
    let mut heap: BinaryHeap<Reverse<usize>> = (0..num_states).filter(|&s| indegree[s] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(num_states);
    while let Some(Reverse(s)) = heap.pop() {
        order.push(s);
        for &d in &succ[s] {
            indegree[d] -= 1;
            if indegree[d] == 0 {
                heap.push(Reverse(d));
            }
        }
    }
    if order.len() < num_states {
        let stuck = (0..num_states).find(|&s| indegree[s] > 0).expect("some state is on a cycle");
        return Err(LatticeError::Cycle(stuck));
    }
    Ok(order)
}

fn parse_score(token: &str, prefix: &str, line: usize) -> Result<f64> {
    let t = token.strip_prefix(prefix).unwrap_or(token);
    t.parse().map_err(|_| LatticeError::Parse { line, detail: format!("bad score `{token}`") })
}

fn parse_state(token: &str, line: usize) -> Result<usize> {
    token.parse().map_err(|_| LatticeError::Parse { line, detail: format!("bad state `{token}`") })
}

struct Block {
    id: Option<String>,
    arcs: Vec<Arc>,
    finals: Vec<usize>,
    first_line: usize,
}

impl Block {
    fn new(line: usize) -> Self {
        Block { id: None, arcs: Vec::new(), finals: Vec::new(), first_line: line }
    }

    fn is_empty(&self) -> bool {
        self.id.is_none() && self.arcs.is_empty() && self.finals.is_empty()
    }

    fn finish(self, index: usize) -> Result<Lattice> {
        let num_states = self
            .arcs
            .iter()
            .flat_map(|a| [a.src, a.dst])
            .chain(self.finals.iter().copied())
            .max()
            .map_or(1, |m| m + 1);
        let id = self.id.unwrap_or_else(|| index.to_string());
        let lattice = Lattice::from_parts(id, num_states, self.arcs, &self.finals).map_err(|e| match e {
            LatticeError::NoFinal => LatticeError::Parse { line: self.first_line, detail: "block has no final state".into() },
            other => other,
        })?;
        let live = lattice.live_states();
        if let Some(s) = live.iter().position(|&l| !l) {
            return Err(if !live[0] { LatticeError::NoPath } else { LatticeError::Dangling(s) });
        }
        Ok(lattice)
    }
}

/// Parses every lattice block in `text`.
pub fn parse_lattices(text: &str, vocab: &Vocabulary) -> Result<Vec<Lattice>> {
    let mut lattices = Vec::new();
    let mut block = Block::new(1);
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        if raw.trim().is_empty() {
            if !block.is_empty() {
                lattices.push(std::mem::replace(&mut block, Block::new(line_no + 1)).finish(lattices.len())?);
            }
            block.first_line = line_no + 1;
            continue;
        }
        for line in raw.split(';') {
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                [] => {}
                ["UTT", id] => {
                    if block.id.is_some() || !block.arcs.is_empty() {
                        return Err(LatticeError::Parse { line: line_no, detail: "UTT header inside a block".into() });
                    }
                    block.id = Some(id.to_string());
                }
                ["F" | "final", s] => block.finals.push(parse_state(s, line_no)?),
                [src, dst, word, am, lm] => {
                    let id = vocab.get(word).filter(|&w| w >= NUM_RESERVED).ok_or_else(|| LatticeError::UnknownWord(word.to_string()))?;
                    block.arcs.push(Arc {
                        src: parse_state(src, line_no)?,
                        dst: parse_state(dst, line_no)?,
                        word: id,
                        am: parse_score(am, "am=", line_no)?,
                        lm: parse_score(lm, "lm=", line_no)?,
                    });
                }
                _ => {
                    return Err(LatticeError::Parse { line: line_no, detail: format!("unrecognised line `{}`", line.trim()) });
                }
            }
        }
    }
    if !block.is_empty() {
        lattices.push(block.finish(lattices.len())?);
    }
    Ok(lattices)
}

/// Parses text holding exactly one lattice.
pub fn parse_lattice(text: &str, vocab: &Vocabulary) -> Result<Lattice> {
    let mut all = parse_lattices(text, vocab)?;
    match all.len() {
        1 => Ok(all.pop().expect("one lattice")),
        n => Err(LatticeError::Parse { line: 1, detail: format!("expected one lattice, found {n}") }),
    }
}

pub fn write_lattices(lattices: &[Lattice], vocab: &Vocabulary) -> String {
    lattices.iter().map(|l| l.to_text(vocab)).collect()
}

/// For each ordinary word, the other words within a character edit
/// distance, weighted by training count + 1.
#[derive(Clone, Debug)]
pub struct ConfusionModel {
    neighbours: Vec<Vec<(usize, f64)>>,
}

impl ConfusionModel {
    pub fn build(vocab: &Vocabulary, max_distance: usize) -> Self {
        let mut neighbours = vec![Vec::new(); vocab.len()];
        for a in NUM_RESERVED..vocab.len() {
            for b in NUM_RESERVED..vocab.len() {
                if a != b && strsim::levenshtein(vocab.word(a), vocab.word(b)) <= max_distance {
                    neighbours[a].push((b, vocab.count(b) as f64 + 1.0));
                }
            }
        }
        ConfusionModel { neighbours }
    }

    pub fn neighbours(&self, word: usize) -> &[(usize, f64)] {
        self.neighbours.get(word).map_or(&[], Vec::as_slice)
    }

    /// Up to `k` distinct confusables of `word`, sampled without
    /// replacement in proportion to their weights.
    pub fn sample<R: Rng>(&self, word: usize, k: usize, rng: &mut R) -> Vec<usize> {
        let n = self.neighbours(word);
        if k == 0 || n.is_empty() {
            return Vec::new();
        }
        n.choose_multiple_weighted(rng, k.min(n.len()), |&(_, w)| w)
            .expect("weights are positive")
            .map(|&(w, _)| w)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatticeSynthConfig {
    /// Maximum candidates per reference position (including the reference).
    pub width: usize,
    /// Probability that a confusable outscores the reference acoustically.
    pub noise: f64,
    /// Spread of acoustic score differences (nats).
    pub gap: f64,
}

impl Default for LatticeSynthConfig {
    fn default() -> Self {
        LatticeSynthConfig { width: 4, noise: 0.3, gap: 4.0 }
    }
}

/// Sausage lattice for `reference`: position `i` spans states `i -> i+1`
/// with the reference word and up to `width - 1` confusables. The reference
/// gets acoustic score `-U(0,1)`; a confusable gets `ref - gap (u - noise)`
/// with `u ~ U(0,1]`, so it beats the reference with probability `noise`.
/// LM scores are left at 0.
pub fn synthesize_lattice(
    id: impl Into<String>,
    reference: &[usize],
    confusion: &ConfusionModel,
    config: &LatticeSynthConfig,
    seed: u64,
) -> Result<Lattice> {
    if reference.is_empty() {
        return Err(LatticeError::EmptyReference);
    }
    if let Some(&w) = reference.iter().find(|&&w| w < NUM_RESERVED) {
        return Err(LatticeError::BadWord(w));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut arcs = Vec::new();
    for (i, &word) in reference.iter().enumerate() {
        let width = rng.gen_range(1..=config.width.max(1));
        let ref_am = -rng.gen::<f64>();
        let mut position = vec![Arc { src: i, dst: i + 1, word, am: ref_am, lm: 0.0 }];
        for c in confusion.sample(word, width - 1, &mut rng) {
            let u = 1.0 - rng.gen::<f64>();
            position.push(Arc { src: i, dst: i + 1, word: c, am: ref_am - config.gap * (u - config.noise), lm: 0.0 });
        }
        position.shuffle(&mut rng);
        arcs.extend(position);
    }
    Lattice::from_parts(id, reference.len() + 1, arcs, &[reference.len()])
}

/// Rebuilds `lattice` so that each state carries a unique n-gram history,
/// and sets every arc's `lm` to the exact n-gram log-probability of its
/// word. The `</s>` probability is added to arcs entering final states,
/// which therefore must have no outgoing arcs.
pub fn apply_first_pass_lm(lattice: &Lattice, ngram: &NgramModel) -> Result<Lattice> {
    if lattice.finals().any(|f| !lattice.out_arcs(f).is_empty()) {
        return Err(LatticeError::FinalWithArcs);
    }
    let keep = ngram.order() - 1;
    let mut ids: HashMap<(usize, Vec<usize>), usize> = HashMap::new();
    let mut by_state: BTreeMap<usize, Vec<(usize, Vec<usize>)>> = BTreeMap::new();
    ids.insert((0, Vec::new()), 0);
    by_state.entry(0).or_default().push((0, Vec::new()));
    let mut arcs = Vec::new();
    let mut finals = Vec::new();
    let mut next = 1;
    for &s in lattice.topo_order() {
        let Some(expanded) = by_state.remove(&s) else { continue };
        for (new_src, history) in expanded {
            if lattice.is_final(s) {
                finals.push(new_src);
            }
            for &a in lattice.out_arcs(s) {
                let arc = lattice.arc(a);
                let mut lm = ngram.score(&history, arc.word);
                let mut h = history.clone();
                h.push(arc.word);
                if h.len() > keep {
                    h.remove(0);
                }
                if lattice.is_final(arc.dst) {
                    lm += ngram.score(&h, EOS);
                }
                let key = (arc.dst, h);
                let new_dst = match ids.get(&key) {
                    Some(&d) => d,
                    None => {
                        let d = next;
                        next += 1;
                        ids.insert(key.clone(), d);
                        by_state.entry(arc.dst).or_default().push((d, key.1));
                        d
                    }
                };
                arcs.push(Arc { src: new_src, dst: new_dst, word: arc.word, am: arc.am, lm });
            }
        }
    }
    finals.sort_unstable();
    let out = Lattice::from_parts(lattice.id.clone(), next, arcs, &finals)?;
    out.trim()
}

#[cfg(test)]
mod tests;

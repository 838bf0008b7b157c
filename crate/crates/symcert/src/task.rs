//! Template families, substitution schemes, sampling and collision primitives.

use std::collections::{BTreeSet, HashMap};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = usize;

/// Maximum number of injective maps enumerated exactly per template.
pub const ENUMERATION_CAP: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Lit(Token),
    Wc(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub slots: Vec<Slot>,
}

impl Template {
    pub fn new(slots: Vec<Slot>) -> Self {
        Template { slots }
    }

    /// Builds a template from a compact pattern such as `"aba"` (wildcards) or
    /// `"#3ab"` where `#3` is the literal token 3.
    pub fn parse(pattern: &str) -> Result<Self> {
        let mut slots = Vec::new();
        let mut names: Vec<char> = Vec::new();
        let mut chars = pattern.chars().peekable();
        while let Some(ch) = chars.next() {
            if ch == '#' {
                let mut digits = String::new();
                while let Some(d) = chars.peek().filter(|d| d.is_ascii_digit()) {
                    digits.push(*d);
                    chars.next();
                }
                let id = digits
                    .parse()
                    .map_err(|_| Error::Invalid(format!("bad literal in pattern {pattern:?}")))?;
                slots.push(Slot::Lit(id));
            } else {
                let idx = match names.iter().position(|&c| c == ch) {
                    Some(i) => i,
                    None => {
                        names.push(ch);
                        names.len() - 1
                    }
                };
                slots.push(Slot::Wc(idx));
            }
        }
        Ok(Template { slots })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn literals(&self) -> BTreeSet<Token> {
        self.slots
            .iter()
            .filter_map(|s| match s {
                Slot::Lit(t) => Some(*t),
                Slot::Wc(_) => None,
            })
            .collect()
    }

    /// Distinct wildcard ids in order of first occurrence; a substitution is a
    /// token vector aligned with this list.
    pub fn wildcards(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for s in &self.slots {
            if let Slot::Wc(w) = s {
                if !out.contains(w) {
                    out.push(*w);
                }
            }
        }
        out
    }

    pub fn wildcard_count(&self) -> usize {
        self.wildcards().len()
    }

    pub fn instantiate(&self, sub: &[Token]) -> Vec<Token> {
        let order = self.wildcards();
        self.slots
            .iter()
            .map(|s| match s {
                Slot::Lit(t) => *t,
                Slot::Wc(w) => sub[order.iter().position(|x| x == w).unwrap()],
            })
            .collect()
    }

    /// Returns the substitution if `string` is an admissible instantiation.
    pub fn match_string(&self, string: &[Token]) -> Option<Vec<Token>> {
        if string.len() != self.len() {
            return None;
        }
        let order = self.wildcards();
        let lits = self.literals();
        let mut sub: Vec<Option<Token>> = vec![None; order.len()];
        for (slot, &tok) in self.slots.iter().zip(string) {
            match slot {
                Slot::Lit(t) => {
                    if *t != tok {
                        return None;
                    }
                }
                Slot::Wc(w) => {
                    let i = order.iter().position(|x| x == w).unwrap();
                    match sub[i] {
                        Some(prev) if prev != tok => return None,
                        _ => sub[i] = Some(tok),
                    }
                }
            }
        }
        let sub: Vec<Token> = sub.into_iter().map(|t| t.unwrap()).collect();
        let distinct: BTreeSet<_> = sub.iter().collect();
        if distinct.len() != sub.len() || sub.iter().any(|t| lits.contains(t)) {
            return None;
        }
        Some(sub)
    }
}

/// A finite family of equal-length templates with labels and sampling masses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateFamily {
    pub templates: Vec<Template>,
    /// Binary families use +1/-1; multiclass families use class indices `0..L`.
    pub labels: Vec<i32>,
    pub masses: Vec<f64>,
}

impl TemplateFamily {
    pub fn new(templates: Vec<Template>, labels: Vec<i32>, masses: Vec<f64>) -> Result<Self> {
        let fam = TemplateFamily { templates, labels, masses };
        fam.check_shape()?;
        Ok(fam)
    }

    /// Two-template equality task: `aa -> +1`, `ab -> -1`, equal masses.
    pub fn equality() -> Self {
        TemplateFamily {
            templates: vec![Template::parse("aa").unwrap(), Template::parse("ab").unwrap()],
            labels: vec![1, -1],
            masses: vec![0.5, 0.5],
        }
    }

    fn check_shape(&self) -> Result<()> {
        let r = self.templates.len();
        if r == 0 {
            return Err(Error::Invalid("empty family".into()));
        }
        if self.labels.len() != r || self.masses.len() != r {
            return Err(Error::Dimension("labels/masses must match templates".into()));
        }
        let k = self.templates[0].len();
        if k == 0 || self.templates.iter().any(|t| t.len() != k) {
            return Err(Error::Invalid("templates must share a positive length".into()));
        }
        if self.masses.iter().any(|&p| p.is_nan() || p <= 0.0) || (self.masses.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid("masses must be positive and sum to 1".into()));
        }
        Ok(())
    }

    pub fn r(&self) -> usize {
        self.templates.len()
    }

    pub fn k(&self) -> usize {
        self.templates[0].len()
    }

    /// Global literal set `R`.
    pub fn literal_set(&self) -> BTreeSet<Token> {
        self.templates.iter().flat_map(|t| t.literals()).collect()
    }

    pub fn p_min(&self) -> f64 {
        self.masses.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Labels as +1/-1 floats; fails for non-binary families.
    pub fn signs(&self) -> Result<Vec<f64>> {
        self.labels
            .iter()
            .map(|&l| match l {
                1 => Ok(1.0),
                -1 => Ok(-1.0),
                _ => Err(Error::Invalid(format!("label {l} is not binary"))),
            })
            .collect()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().map(|&l| l.max(0) as usize + 1).max().unwrap_or(0)
    }

    /// Unique matching template, `None` if no template matches.
    pub fn classify(&self, string: &[Token]) -> Result<Option<usize>> {
        let mut found = None;
        for (a, t) in self.templates.iter().enumerate() {
            if t.match_string(string).is_some() {
                if let Some(first) = found {
                    return Err(Error::FamilyNotDisjoint {
                        string: string.to_vec(),
                        first,
                        second: a,
                    });
                }
                found = Some(a);
            }
        }
        Ok(found)
    }

    /// Structural signature check followed by randomized cross-matching of
    /// sampled strings.
    pub fn validate(&self, scheme: &SubstitutionScheme, trials: usize, seed: u64) -> Result<()> {
        self.check_shape()?;
        scheme.check(self)?;
        let mut sigs = BTreeSet::new();
        for t in &self.templates {
            if !sigs.insert(signature(t)) {
                return Err(Error::Invalid("two templates share a literal/equality signature".into()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..trials {
            let a = rng.random_range(0..self.r());
            let sub = scheme.sample_sub(self, a, Split::Train, &mut rng)?;
            let s = self.templates[a].instantiate(&sub);
            match self.classify(&s)? {
                Some(b) if b == a => {}
                other => return Err(Error::Invalid(format!("string {s:?} from template {a} classified as {other:?}"))),
            }
        }
        Ok(())
    }
}

fn signature(t: &Template) -> Vec<(bool, usize)> {
    let order = t.wildcards();
    t.slots
        .iter()
        .map(|s| match s {
            Slot::Lit(tok) => (true, *tok),
            Slot::Wc(w) => (false, order.iter().position(|x| x == w).unwrap()),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Alphabet {
    pub train: Vec<Token>,
    #[serde(default)]
    pub val: Vec<Token>,
    #[serde(default)]
    pub test: Vec<Token>,
}

impl Alphabet {
    /// Contiguous id ranges `[base, base+train)`, then validation, then test.
    pub fn ranges(base: Token, train: usize, val: usize, test: usize) -> Self {
        Alphabet {
            train: (base..base + train).collect(),
            val: (base + train..base + train + val).collect(),
            test: (base + train + val..base + train + val + test).collect(),
        }
    }

    pub fn split(&self, split: Split) -> &[Token] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// A weighted list of admissible substitutions for one template.
pub type SubTable = Vec<(Vec<Token>, f64)>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    UniformInjective,
    /// One weighted table of training substitutions per template.
    Table(Vec<SubTable>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubstitutionScheme {
    pub alphabet: Alphabet,
    pub policy: Policy,
}

impl SubstitutionScheme {
    pub fn uniform(alphabet: Alphabet) -> Self {
        SubstitutionScheme {
            alphabet,
            policy: Policy::UniformInjective,
        }
    }

    /// Tokens available to template `a` in a split: the split minus the template's literals.
    pub fn admissible_tokens(&self, fam: &TemplateFamily, a: usize, split: Split) -> Vec<Token> {
        let lits = fam.templates[a].literals();
        self.alphabet.split(split).iter().copied().filter(|t| !lits.contains(t)).collect()
    }

    pub fn check(&self, fam: &TemplateFamily) -> Result<()> {
        let sets = [&self.alphabet.train, &self.alphabet.val, &self.alphabet.test];
        for i in 0..3 {
            for j in i + 1..3 {
                if sets[i].iter().any(|t| sets[j].contains(t)) {
                    return Err(Error::SchemeInfeasible("train/val/test ranges overlap".into()));
                }
            }
        }
        for a in 0..fam.r() {
            let w = fam.templates[a].wildcard_count();
            let m = self.admissible_tokens(fam, a, Split::Train).len();
            if m < w {
                return Err(Error::SchemeInfeasible(format!(
                    "template {a} needs {w} distinct tokens but only {m} are admissible"
                )));
            }
            if let Policy::Table(tables) = &self.policy {
                let table = tables
                    .get(a)
                    .ok_or_else(|| Error::SchemeInfeasible(format!("no table for template {a}")))?;
                let total: f64 = table.iter().map(|(_, w)| w).sum();
                if table.is_empty() || (total - 1.0).abs() > 1e-9 {
                    return Err(Error::SchemeInfeasible(format!("table {a} weights must sum to 1")));
                }
                let lits = fam.templates[a].literals();
                for (sub, _) in table {
                    let distinct: BTreeSet<_> = sub.iter().collect();
                    if sub.len() != w || distinct.len() != w || sub.iter().any(|t| lits.contains(t)) {
                        return Err(Error::SchemeInfeasible(format!(
                            "inadmissible substitution {sub:?} for template {a}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn sample_sub<R: Rng + ?Sized>(&self, fam: &TemplateFamily, a: usize, split: Split, rng: &mut R) -> Result<Vec<Token>> {
        let w = fam.templates[a].wildcard_count();
        if let (Policy::Table(tables), Split::Train) = (&self.policy, split) {
            let table = &tables[a];
            let mut x: f64 = rng.random();
            for (sub, p) in table {
                if x < *p {
                    return Ok(sub.clone());
                }
                x -= p;
            }
            return Ok(table.last().unwrap().0.clone());
        }
        let pool = self.admissible_tokens(fam, a, split);
        if pool.len() < w {
            return Err(Error::SchemeInfeasible(format!(
                "template {a}: {} admissible tokens for {w} wildcards",
                pool.len()
            )));
        }
        Ok(pool.choose_multiple(rng, w).copied().collect())
    }

    /// Training substitution support of template `a` with probabilities, or
    /// `None` when it exceeds `cap`.
    pub fn support(&self, fam: &TemplateFamily, a: usize, cap: usize) -> Option<SubTable> {
        if let Policy::Table(tables) = &self.policy {
            return Some(tables[a].clone());
        }
        let pool = self.admissible_tokens(fam, a, Split::Train);
        let w = fam.templates[a].wildcard_count();
        let count = falling_factorial(pool.len(), w);
        if count > cap as f64 {
            return None;
        }
        let p = 1.0 / count;
        let mut out = Vec::with_capacity(count as usize);
        let mut cur = Vec::with_capacity(w);
        let mut used = vec![false; pool.len()];
        enumerate_injective(&pool, w, &mut cur, &mut used, &mut |s| out.push((s.to_vec(), p)));
        Some(out)
    }
}

fn enumerate_injective(pool: &[Token], w: usize, cur: &mut Vec<Token>, used: &mut [bool], f: &mut dyn FnMut(&[Token])) {
    if cur.len() == w {
        f(cur);
        return;
    }
    for i in 0..pool.len() {
        if !used[i] {
            used[i] = true;
            cur.push(pool[i]);
            enumerate_injective(pool, w, cur, used, f);
            cur.pop();
            used[i] = false;
        }
    }
}

pub fn falling_factorial(m: usize, w: usize) -> f64 {
    if w > m {
        return 0.0;
    }
    (0..w).map(|i| (m - i) as f64).product()
}

fn ln_binom(n: usize, k: usize) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

/// One labelled instantiation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub template: usize,
    pub sub: Vec<Token>,
    pub string: Vec<Token>,
    pub label: i32,
}

impl Sample {
    pub fn new(fam: &TemplateFamily, template: usize, sub: Vec<Token>) -> Self {
        let string = fam.templates[template].instantiate(&sub);
        Sample {
            template,
            sub,
            string,
            label: fam.labels[template],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub r: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.samples.len()
    }

    pub fn colors(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.template).collect()
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        let mut out = vec![0; self.r];
        for s in &self.samples {
            out[s.template] += 1;
        }
        out
    }

    /// Index sets `I_b`.
    pub fn blocks(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.r];
        for (i, s) in self.samples.iter().enumerate() {
            out[s.template].push(i);
        }
        out
    }

    /// Empirical masses; `None` for an empty dataset.
    pub fn p_hat(&self) -> Option<Vec<f64>> {
        if self.samples.is_empty() {
            return None;
        }
        let n = self.n() as f64;
        Some(self.block_sizes().iter().map(|&c| c as f64 / n).collect())
    }

    /// Every empirical mass is at least half its population mass.
    pub fn e_rep(&self, masses: &[f64]) -> bool {
        match self.p_hat() {
            Some(p) => p.iter().zip(masses).all(|(ph, pa)| *ph >= 0.5 * pa),
            None => false,
        }
    }

    pub fn signs(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.label as f64).collect()
    }
}

/// Draws `n` samples by template-then-substitution from the training split.
pub fn sample_dataset(fam: &TemplateFamily, scheme: &SubstitutionScheme, n: usize, seed: u64) -> Result<Dataset> {
    scheme.check(fam)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_dataset_with(fam, scheme, n, &mut rng)
}

pub fn sample_dataset_with<R: Rng + ?Sized>(fam: &TemplateFamily, scheme: &SubstitutionScheme, n: usize, rng: &mut R) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let a = draw_template(&fam.masses, rng);
        let sub = scheme.sample_sub(fam, a, Split::Train, rng)?;
        samples.push(Sample::new(fam, a, sub));
    }
    Ok(Dataset { r: fam.r(), samples })
}

fn draw_template<R: Rng + ?Sized>(masses: &[f64], rng: &mut R) -> usize {
    let mut x: f64 = rng.random();
    for (a, &p) in masses.iter().enumerate() {
        if x < p {
            return a;
        }
        x -= p;
    }
    masses.len() - 1
}

/// Draws a globally fresh test string of template `a` from the test split.
pub fn sample_test<R: Rng + ?Sized>(fam: &TemplateFamily, scheme: &SubstitutionScheme, a: usize, rng: &mut R) -> Result<Sample> {
    let sub = scheme.sample_sub(fam, a, Split::Test, rng)?;
    Ok(Sample::new(fam, a, sub))
}

/// Canonical fresh admissible pair for templates `(a, b)` drawn from `vocab`:
/// the smallest tokens avoiding `L_a` and `L_b`, first for `a`, then for `b`.
pub fn fresh_pair(fam: &TemplateFamily, vocab: &[Token], a: usize, b: usize) -> Result<(Vec<Token>, Vec<Token>)> {
    let mut banned = fam.templates[a].literals();
    banned.extend(fam.templates[b].literals());
    let mut pool: Vec<Token> = vocab.iter().copied().filter(|t| !banned.contains(t)).collect();
    pool.sort_unstable();
    pool.dedup();
    let wa = fam.templates[a].wildcard_count();
    let wb = fam.templates[b].wildcard_count();
    if pool.len() < wa + wb {
        return Err(Error::NoFreshPair { a, b, vocab: vocab.len() });
    }
    Ok((pool[..wa].to_vec(), pool[wa..wa + wb].to_vec()))
}

/// The three-way collision event between two realized instantiations: a
/// wildcard image hits the other template's literals, or the images overlap.
pub fn bad_pair(fam: &TemplateFamily, b: usize, s: &[Token], c: usize, t: &[Token]) -> bool {
    let lb = fam.templates[b].literals();
    let lc = fam.templates[c].literals();
    s.iter().any(|x| lc.contains(x)) || t.iter().any(|x| lb.contains(x)) || s.iter().any(|x| t.contains(x))
}

/// Collision event between a training instantiation and the test point.
pub fn bad_test(fam: &TemplateFamily, b: usize, s: &[Token], test: &Sample) -> bool {
    bad_pair(fam, b, s, test.template, &test.sub)
}

/// Token marginals, literal-hit masses, overlap masses and pair envelopes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CollisionPrimitives {
    /// `p[b]` maps token to `P[t in S(W_b)]`.
    pub p: Vec<HashMap<Token, f64>>,
    pub ell: Vec<Vec<f64>>,
    pub chi: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub q_test: Vec<f64>,
    pub rho: f64,
    pub q_wild: Vec<Vec<f64>>,
    pub w_max: usize,
}

/// Exact primitives: uniform-injective marginals are `w_b / m_b` on the
/// admissible pool; table policies are summed over their support.
pub fn collision_primitives(fam: &TemplateFamily, scheme: &SubstitutionScheme, test: &Sample) -> Result<CollisionPrimitives> {
    scheme.check(fam)?;
    let r = fam.r();
    let mut p: Vec<HashMap<Token, f64>> = Vec::with_capacity(r);
    for b in 0..r {
        let mut map = HashMap::new();
        match &scheme.policy {
            Policy::UniformInjective => {
                let pool = scheme.admissible_tokens(fam, b, Split::Train);
                let w = fam.templates[b].wildcard_count();
                if w > 0 {
                    let v = w as f64 / pool.len() as f64;
                    for t in pool {
                        map.insert(t, v);
                    }
                }
            }
            Policy::Table(tables) => {
                for (sub, wt) in &tables[b] {
                    for &t in sub {
                        *map.entry(t).or_insert(0.0) += wt;
                    }
                }
            }
        }
        p.push(map);
    }
    let lits: Vec<BTreeSet<Token>> = fam.templates.iter().map(|t| t.literals()).collect();
    let ell: Vec<Vec<f64>> = (0..r)
        .map(|b| {
            (0..r)
                .map(|c| lits[c].iter().map(|t| p[b].get(t).copied().unwrap_or(0.0)).sum())
                .collect()
        })
        .collect();
    let chi: Vec<Vec<f64>> = (0..r)
        .map(|b| {
            (0..r)
                .map(|c| p[b].iter().map(|(t, v)| v * p[c].get(t).copied().unwrap_or(0.0)).sum())
                .collect()
        })
        .collect();
    let q: Vec<Vec<f64>> = (0..r)
        .map(|b| (0..r).map(|c| (ell[b][c] + ell[c][b] + chi[b][c]).min(1.0)).collect())
        .collect();
    let a = test.template;
    let q_test = (0..r)
        .map(|b| {
            let hits: f64 = test.sub.iter().map(|t| p[b].get(t).copied().unwrap_or(0.0)).sum();
            (ell[b][a] + hits).min(1.0)
        })
        .collect();
    let pmax = p.iter().flat_map(|m| m.values().copied()).fold(0.0f64, f64::max);
    let rho = if pmax > 0.0 { 1.0 / pmax } else { f64::INFINITY };
    let q_wild = (0..r)
        .map(|b| (0..r).map(|c| wildcard_overlap(fam, scheme, b, c)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let w_max = fam.templates.iter().map(|t| t.wildcard_count()).max().unwrap_or(0);
    Ok(CollisionPrimitives {
        p,
        ell,
        chi,
        q,
        q_test,
        rho,
        q_wild,
        w_max,
    })
}

/// Exact probability that independent training substitutions of `b` and `c`
/// have intersecting wildcard images.
pub fn wildcard_overlap(fam: &TemplateFamily, scheme: &SubstitutionScheme, b: usize, c: usize) -> Result<f64> {
    match &scheme.policy {
        Policy::UniformInjective => {
            let ab = scheme.admissible_tokens(fam, b, Split::Train);
            let ac = scheme.admissible_tokens(fam, c, Split::Train);
            let (wb, wc) = (fam.templates[b].wildcard_count(), fam.templates[c].wildcard_count());
            if wb == 0 || wc == 0 {
                return Ok(0.0);
            }
            let overlap = ab.iter().filter(|t| ac.contains(t)).count();
            let (mb, mc) = (ab.len(), ac.len());
            // K = |S ∩ A_c| is hypergeometric; given K = k the c-draw must avoid k tokens.
            let mut miss = 0.0;
            for k in 0..=wb.min(overlap) {
                if wb - k > mb - overlap {
                    continue;
                }
                let ln_pk = ln_binom(overlap, k) + ln_binom(mb - overlap, wb - k) - ln_binom(mb, wb);
                let avoid: f64 = (0..wc)
                    .map(|i| (mc as f64 - k as f64 - i as f64).max(0.0) / (mc - i) as f64)
                    .product();
                miss += ln_pk.exp() * avoid;
            }
            Ok((1.0 - miss).clamp(0.0, 1.0))
        }
        Policy::Table(tables) => {
            let mut hit = 0.0;
            for (s, ws) in &tables[b] {
                for (t, wt) in &tables[c] {
                    if s.iter().any(|x| t.contains(x)) {
                        hit += ws * wt;
                    }
                }
            }
            Ok(hit)
        }
    }
}

/// Dense `r x r` table indexed by template pairs.
pub type Table = Vec<Vec<f64>>;

/// Monte Carlo estimate of the unclipped envelope `l_{b->c} + l_{c->b} + chi_bc`
/// as the expected count of literal hits and overlapping images; returns the
/// mean and standard-error matrices.
pub fn collision_mc(fam: &TemplateFamily, scheme: &SubstitutionScheme, draws: usize, seed: u64) -> Result<(Table, Table)> {
    let r = fam.r();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lits: Vec<BTreeSet<Token>> = fam.templates.iter().map(|t| t.literals()).collect();
    let mut mean = vec![vec![0.0; r]; r];
    let mut se = vec![vec![0.0; r]; r];
    for b in 0..r {
        for c in 0..r {
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..draws {
                let s = scheme.sample_sub(fam, b, Split::Train, &mut rng)?;
                let t = scheme.sample_sub(fam, c, Split::Train, &mut rng)?;
                let x = s.iter().filter(|x| lits[c].contains(x)).count()
                    + t.iter().filter(|x| lits[b].contains(x)).count()
                    + s.iter().filter(|x| t.contains(x)).count();
                s1 += x as f64;
                s2 += (x * x) as f64;
            }
            let m = s1 / draws as f64;
            let var = (s2 / draws as f64 - m * m).max(0.0);
            mean[b][c] = m;
            se[b][c] = (var / draws as f64).sqrt();
        }
    }
    Ok((mean, se))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ten_tokens() -> SubstitutionScheme {
        SubstitutionScheme::uniform(Alphabet::ranges(0, 10, 0, 4))
    }

    #[test]
    fn classify_equality_strings() {
        let fam = TemplateFamily::equality();
        assert_eq!(fam.classify(&[2, 2]).unwrap(), Some(0));
        assert_eq!(fam.classify(&[0, 1]).unwrap(), Some(1));
        let lit = TemplateFamily::new(
            vec![Template::parse("#7a").unwrap(), Template::parse("#8a").unwrap()],
            vec![1, -1],
            vec![0.5, 0.5],
        )
        .unwrap();
        // a literal inside a wildcard slot is inadmissible for its own template
        assert_eq!(lit.classify(&[7, 7]).unwrap(), None);
        assert_eq!(lit.classify(&[9, 7]).unwrap(), None);
    }

    #[test]
    fn overlapping_family_is_rejected() {
        let fam = TemplateFamily::new(
            vec![Template::parse("ab").unwrap(), Template::parse("cd").unwrap()],
            vec![1, -1],
            vec![0.5, 0.5],
        )
        .unwrap();
        assert!(matches!(fam.classify(&[0, 1]), Err(Error::FamilyNotDisjoint { .. })));
        assert!(fam.validate(&ten_tokens(), 100, 1).is_err());
    }

    #[test]
    fn sampling_edge_cases() {
        let fam = TemplateFamily::equality();
        let ds = sample_dataset(&fam, &ten_tokens(), 0, 3).unwrap();
        assert!(ds.p_hat().is_none());
        let single = TemplateFamily::new(vec![Template::parse("ab").unwrap()], vec![1], vec![1.0]).unwrap();
        let ds = sample_dataset(&single, &ten_tokens(), 17, 3).unwrap();
        assert_eq!(ds.p_hat().unwrap(), vec![1.0]);
        for s in &ds.samples {
            assert_eq!(single.classify(&s.string).unwrap(), Some(0));
        }
        let tiny = SubstitutionScheme::uniform(Alphabet::ranges(0, 1, 0, 0));
        assert!(matches!(sample_dataset(&fam, &tiny, 4, 0), Err(Error::SchemeInfeasible(_))));
    }

    #[test]
    fn sampling_is_deterministic() {
        let fam = TemplateFamily::equality();
        let a = sample_dataset(&fam, &ten_tokens(), 50, 9).unwrap();
        let b = sample_dataset(&fam, &ten_tokens(), 50, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn diversity_and_overlap_for_two_wildcards() {
        let fam = TemplateFamily::new(
            vec![Template::parse("ab").unwrap(), Template::parse("abb").unwrap()],
            vec![1, -1],
            vec![0.5, 0.5],
        );
        // different lengths are rejected, use an equal-length pair instead
        assert!(fam.is_err());
        let fam = TemplateFamily::new(
            vec![Template::parse("aab").unwrap(), Template::parse("abb").unwrap()],
            vec![1, -1],
            vec![0.5, 0.5],
        )
        .unwrap();
        let scheme = SubstitutionScheme::uniform(Alphabet::ranges(0, 10, 0, 4));
        let test = Sample::new(&fam, 0, vec![10, 11]);
        let prim = collision_primitives(&fam, &scheme, &test).unwrap();
        assert_abs_diff_eq!(prim.rho, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(prim.q_wild[0][1], 34.0 / 90.0, epsilon = 1e-12);
        assert_eq!(prim.q_test, vec![0.0, 0.0]);
    }

    #[test]
    fn equality_pattern_overlap_matrix() {
        let fam = TemplateFamily::equality();
        for m in [5usize, 12, 40] {
            let scheme = SubstitutionScheme::uniform(Alphabet::ranges(0, m, 0, 2));
            let mf = m as f64;
            let want = [[1.0 / mf, 2.0 / mf], [2.0 / mf, (4.0 * mf - 6.0) / (mf * (mf - 1.0))]];
            for (b, row) in want.iter().enumerate() {
                for (c, &w) in row.iter().enumerate() {
                    assert_abs_diff_eq!(wildcard_overlap(&fam, &scheme, b, c).unwrap(), w, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn overlap_formula_matches_brute_force() {
        let fam = TemplateFamily::new(
            vec![Template::parse("#0ab").unwrap(), Template::parse("#1aa").unwrap()],
            vec![1, -1],
            vec![0.5, 0.5],
        )
        .unwrap();
        let scheme = SubstitutionScheme::uniform(Alphabet::ranges(0, 7, 0, 0));
        for b in 0..2 {
            for c in 0..2 {
                let sb = scheme.support(&fam, b, ENUMERATION_CAP).unwrap();
                let sc = scheme.support(&fam, c, ENUMERATION_CAP).unwrap();
                let mut hit = 0.0;
                for (s, ws) in &sb {
                    for (t, wt) in &sc {
                        if s.iter().any(|x| t.contains(x)) {
                            hit += ws * wt;
                        }
                    }
                }
                assert_abs_diff_eq!(wildcard_overlap(&fam, &scheme, b, c).unwrap(), hit, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn fresh_pairs_avoid_literals_and_repeat() {
        let fam = TemplateFamily::new(
            vec![Template::parse("#0ab").unwrap(), Template::parse("#1ab").unwrap()],
            vec![1, -1],
            vec![0.5, 0.5],
        )
        .unwrap();
        let vocab: Vec<Token> = (0..8).collect();
        let (s, t) = fresh_pair(&fam, &vocab, 1, 1).unwrap();
        let all: BTreeSet<_> = s.iter().chain(&t).collect();
        assert_eq!(all.len(), 4);
        assert!(!all.contains(&1));
        assert_eq!(fresh_pair(&fam, &vocab, 1, 1).unwrap(), (s, t));
        let (u, v) = fresh_pair(&fam, &vocab, 0, 1).unwrap();
        assert!(u.iter().chain(&v).all(|x| *x > 1));
        assert!(matches!(fresh_pair(&fam, &vocab[..4], 0, 1), Err(Error::NoFreshPair { .. })));
    }

    #[test]
    fn mc_matches_exact_envelope() {
        let fam = TemplateFamily::new(
            vec![Template::parse("#0ab").unwrap(), Template::parse("#1aa").unwrap()],
            vec![1, -1],
            vec![0.5, 0.5],
        )
        .unwrap();
        let scheme = SubstitutionScheme::uniform(Alphabet::ranges(0, 9, 0, 2));
        let test = Sample::new(&fam, 0, vec![9, 10]);
        let prim = collision_primitives(&fam, &scheme, &test).unwrap();
        let (mean, se) = collision_mc(&fam, &scheme, 100_000, 5).unwrap();
        for b in 0..2 {
            for c in 0..2 {
                let exact = prim.ell[b][c] + prim.ell[c][b] + prim.chi[b][c];
                assert!(
                    (mean[b][c] - exact).abs() <= 4.0 * se[b][c] + 1e-12,
                    "{b}{c}: {} vs {exact}",
                    mean[b][c]
                );
            }
        }
    }
}

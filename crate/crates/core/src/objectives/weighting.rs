use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Objective {
    L1,
    Normal,
    Gan,
    Seg,
}

/// How a learned log-variance turns into a loss weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightKind {
    Regression,
    Classification,
    Adversarial,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::L1, Objective::Normal, Objective::Gan, Objective::Seg];

    pub fn name(self) -> &'static str {
        match self {
            Objective::L1 => "l1",
            Objective::Normal => "normal",
            Objective::Gan => "gan",
            Objective::Seg => "seg",
        }
    }

    pub fn kind(self) -> WeightKind {
        match self {
            Objective::L1 | Objective::Normal => WeightKind::Regression,
            Objective::Seg => WeightKind::Classification,
            Objective::Gan => WeightKind::Adversarial,
        }
    }

    fn bit(self) -> u8 {
        1 << self as u8
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "l1" => Ok(Objective::L1),
            "normal" | "n" => Ok(Objective::Normal),
            "gan" => Ok(Objective::Gan),
            "seg" => Ok(Objective::Seg),
            other => Err(Error::Config(format!("unknown objective `{other}`"))),
        }
    }
}

/// A subset of the four objectives.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ObjectiveSet(u8);

impl ObjectiveSet {
    pub const L1_ONLY: ObjectiveSet = ObjectiveSet(1);
    pub const ALL: ObjectiveSet = ObjectiveSet(0b1111);

    pub fn from_objectives(objs: &[Objective]) -> Self {
        ObjectiveSet(objs.iter().fold(0, |m, o| m | o.bit()))
    }

    pub fn contains(self, o: Objective) -> bool {
        self.0 & o.bit() != 0
    }

    pub fn with(self, o: Objective) -> Self {
        ObjectiveSet(self.0 | o.bit())
    }

    pub fn iter(self) -> impl Iterator<Item = Objective> {
        Objective::ALL.into_iter().filter(move |o| self.contains(*o))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for ObjectiveSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(Objective::name).collect();
        write!(f, "{}", names.join("+"))
    }
}

impl fmt::Debug for ObjectiveSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{self}}}")
    }
}

impl FromStr for ObjectiveSet {
    type Err = Error;

    /// Accepts names separated by `,` or `+`.
    fn from_str(s: &str) -> Result<Self> {
        let objs = s
            .split([',', '+'])
            .filter(|p| !p.trim().is_empty())
            .map(Objective::from_str)
            .collect::<Result<Vec<_>>>()?;
        Ok(ObjectiveSet::from_objectives(&objs))
    }
}

impl Serialize for ObjectiveSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.iter().map(Objective::name))
    }
}

impl<'de> Deserialize<'de> for ObjectiveSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        let objs = names
            .iter()
            .map(|n| n.parse::<Objective>())
            .collect::<Result<Vec<_>>>()
            .map_err(serde::de::Error::custom)?;
        Ok(ObjectiveSet::from_objectives(&objs))
    }
}

/// Log-variances of the task weights. The adversarial entry is a fixed
/// multiplier and is never optimized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightState {
    pub s_l1: f64,
    pub s_n: f64,
    pub s_seg: f64,
    pub s_gan: f64,
}

impl Default for WeightState {
    fn default() -> Self {
        WeightState { s_l1: 0.0, s_n: 0.0, s_seg: 0.0, s_gan: 1.0 }
    }
}

impl WeightState {
    pub fn get(&self, o: Objective) -> f64 {
        match o {
            Objective::L1 => self.s_l1,
            Objective::Normal => self.s_n,
            Objective::Seg => self.s_seg,
            Objective::Gan => self.s_gan,
        }
    }

    pub fn set(&mut self, o: Objective, v: f64) {
        match o {
            Objective::L1 => self.s_l1 = v,
            Objective::Normal => self.s_n = v,
            Objective::Seg => self.s_seg = v,
            Objective::Gan => self.s_gan = v,
        }
    }

    /// The optimizable entries in a fixed order: l1, normal, seg.
    pub fn learnable(&self) -> [f64; 3] {
        [self.s_l1, self.s_n, self.s_seg]
    }

    pub fn set_learnable(&mut self, v: [f64; 3]) {
        [self.s_l1, self.s_n, self.s_seg] = v;
    }

    pub fn validate(&self) -> Result<()> {
        if [self.s_l1, self.s_n, self.s_seg, self.s_gan].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("weight state must be finite".into()))
        }
    }
}

/// Loss weight `w` and regularizer `r` for a log-variance `s`.
pub fn effective_weight(s: f64, kind: WeightKind) -> Result<(f64, f64)> {
    if !s.is_finite() {
        return Err(Error::invalid(format!("log-variance must be finite, got {s}")));
    }
    Ok(match kind {
        WeightKind::Regression => (0.5 * (-s).exp(), 0.5 * s),
        WeightKind::Classification => ((-s).exp(), 0.5 * s),
        WeightKind::Adversarial => (s, 0.0),
    })
}

/// Raw objective values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RawLosses([Option<f64>; 4]);

impl RawLosses {
    pub fn set(&mut self, o: Objective, v: f64) -> &mut Self {
        self.0[o.index()] = Some(v);
        self
    }

    pub fn get(&self, o: Objective) -> Option<f64> {
        self.0[o.index()]
    }
}

/// One objective's contribution: `raw * weight + reg`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerm {
    pub raw: f64,
    pub weight: f64,
    pub reg: f64,
    pub s: f64,
}

impl LossTerm {
    pub fn contribution(&self) -> f64 {
        self.raw * self.weight + self.reg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    terms: [Option<LossTerm>; 4],
    pub total: f64,
}

impl LossReport {
    pub fn term(&self, o: Objective) -> Option<&LossTerm> {
        self.terms[o.index()].as_ref()
    }

    /// `d total / d raw`, zero for inactive objectives.
    pub fn raw_weight(&self, o: Objective) -> f64 {
        self.term(o).map_or(0.0, |t| t.weight)
    }

    /// `d total / d s`; zero for the fixed adversarial weight and for
    /// inactive objectives.
    pub fn grad_s(&self, o: Objective) -> f64 {
        let Some(t) = self.term(o) else { return 0.0 };
        match o.kind() {
            WeightKind::Regression | WeightKind::Classification => 0.5 - t.raw * t.weight,
            WeightKind::Adversarial => 0.0,
        }
    }

    pub fn csv_header() -> String {
        let mut cols = vec!["step".to_string()];
        for field in ["raw", "w", "r", "s"] {
            for o in Objective::ALL {
                cols.push(format!("{field}_{}", o.name()));
            }
        }
        cols.push("total".into());
        cols.join(",")
    }

    /// Inactive objectives leave their cells empty.
    pub fn csv_row(&self, step: usize) -> String {
        let mut cells = vec![step.to_string()];
        for pick in [
            (|t: &LossTerm| t.raw) as fn(&LossTerm) -> f64,
            |t| t.weight,
            |t| t.reg,
            |t| t.s,
        ] {
            for o in Objective::ALL {
                cells.push(self.term(o).map_or(String::new(), |t| format!("{:e}", pick(t))));
            }
        }
        cells.push(format!("{:e}", self.total));
        cells.join(",")
    }
}

/// Sums `raw * w + r` over the active objectives.
pub fn combine_multitask(raw: &RawLosses, ws: &WeightState, active: ObjectiveSet) -> Result<LossReport> {
    let mut terms = [None; 4];
    let mut total = 0.0;
    for o in active.iter() {
        let value = raw.get(o).ok_or_else(|| Error::invalid(format!("missing raw value for active objective {}", o.name())))?;
        if !value.is_finite() {
            return Err(Error::invalid(format!("raw {} loss is not finite", o.name())));
        }
        let s = ws.get(o);
        let (weight, reg) = effective_weight(s, o.kind())?;
        let term = LossTerm { raw: value, weight, reg, s };
        total += term.contribution();
        terms[o.index()] = Some(term);
    }
    Ok(LossReport { terms, total })
}

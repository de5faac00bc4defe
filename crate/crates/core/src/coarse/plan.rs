//! Per-step, per-role cache decisions and their text serialization.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockRole {
    CtrlEncoder,
    CtrlMid,
    GenEncoder,
    GenMid,
    GenDecoder,
}

impl BlockRole {
    pub const ALL: [BlockRole; 5] = [
        BlockRole::CtrlEncoder,
        BlockRole::CtrlMid,
        BlockRole::GenEncoder,
        BlockRole::GenMid,
        BlockRole::GenDecoder,
    ];
    pub const CONTROL: [BlockRole; 2] = [BlockRole::CtrlEncoder, BlockRole::CtrlMid];
    pub const GENERATIVE: [BlockRole; 3] = [
        BlockRole::GenEncoder,
        BlockRole::GenMid,
        BlockRole::GenDecoder,
    ];

    pub fn is_control(self) -> bool {
        matches!(self, BlockRole::CtrlEncoder | BlockRole::CtrlMid)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BlockRole::CtrlEncoder => "ctrl_encoder",
            BlockRole::CtrlMid => "ctrl_mid",
            BlockRole::GenEncoder => "gen_encoder",
            BlockRole::GenMid => "gen_mid",
            BlockRole::GenDecoder => "gen_decoder",
        }
    }
}

impl fmt::Display for BlockRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlockRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BlockRole::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::PlanIntegrity(format!("unknown block role `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    Compute,
    Reuse(usize),
    Skip,
}

impl Decision {
    pub fn is_compute(self) -> bool {
        matches!(self, Decision::Compute)
    }

    /// Grid symbol: `C`, `R(s)` or `S`.
    pub fn symbol(self) -> String {
        match self {
            Decision::Compute => "C".into(),
            Decision::Reuse(s) => format!("R({s})"),
            Decision::Skip => "S".into(),
        }
    }
}

/// Decision table over steps `1..=horizon` for a set of block roles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CachePlan {
    horizon: usize,
    decisions: BTreeMap<(usize, BlockRole), Decision>,
}

impl CachePlan {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            decisions: BTreeMap::new(),
        }
    }

    /// Every listed role computes at every step.
    pub fn all_compute(horizon: usize, roles: &[BlockRole]) -> Self {
        let mut plan = Self::new(horizon);
        for step in 1..=horizon {
            for &role in roles {
                plan.set(step, role, Decision::Compute);
            }
        }
        plan
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn set(&mut self, step: usize, role: BlockRole, decision: Decision) {
        self.decisions.insert((step, role), decision);
    }

    pub fn get(&self, step: usize, role: BlockRole) -> Option<Decision> {
        self.decisions.get(&(step, role)).copied()
    }

    pub fn roles(&self) -> Vec<BlockRole> {
        let mut roles: Vec<BlockRole> = self.decisions.keys().map(|&(_, r)| r).collect();
        roles.sort();
        roles.dedup();
        roles
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, BlockRole, Decision)> + '_ {
        self.decisions.iter().map(|(&(s, r), &d)| (s, r, d))
    }

    /// Steps at which `role` computes.
    pub fn compute_steps(&self, role: BlockRole) -> Vec<usize> {
        (1..=self.horizon)
            .filter(|&s| self.get(s, role) == Some(Decision::Compute))
            .collect()
    }

    /// Copy of the plan keeping only `roles`.
    pub fn subset(&self, roles: &[BlockRole]) -> CachePlan {
        CachePlan {
            horizon: self.horizon,
            decisions: self
                .decisions
                .iter()
                .filter(|((_, r), _)| roles.contains(r))
                .map(|(&k, &d)| (k, d))
                .collect(),
        }
    }

    /// Union of two plans over disjoint role sets.
    pub fn merge(&self, other: &CachePlan) -> Result<CachePlan> {
        let mut out = self.clone();
        out.horizon = self.horizon.max(other.horizon);
        for (key, &d) in &other.decisions {
            if out.decisions.insert(*key, d).is_some() {
                return Err(Error::PlanIntegrity(format!(
                    "merge conflict at step {} role {}",
                    key.0, key.1
                )));
            }
        }
        Ok(out)
    }

    /// Restricts `roles` to computing only inside `[start, end]`, skipping elsewhere.
    pub fn restrict_window(&mut self, roles: &[BlockRole], start: usize, end: usize) {
        for step in 1..=self.horizon {
            if step < start || step > end {
                for &role in roles {
                    if self.decisions.contains_key(&(step, role)) {
                        self.set(step, role, Decision::Skip);
                    }
                }
            }
        }
    }

    /// Checks every structural invariant a plan must satisfy before execution.
    pub fn validate(&self) -> Result<()> {
        let roles = self.roles();
        for &role in &roles {
            for step in 1..=self.horizon {
                let d = self.get(step, role).ok_or_else(|| {
                    Error::PlanIntegrity(format!("no decision for step {step} role {role}"))
                })?;
                match d {
                    Decision::Compute => {}
                    Decision::Skip if !role.is_control() => {
                        return Err(Error::PlanIntegrity(format!(
                            "skip at step {step} for generative role {role}"
                        )))
                    }
                    Decision::Skip => {}
                    Decision::Reuse(src) => {
                        if src == 0 || src >= step {
                            return Err(Error::PlanIntegrity(format!(
                                "step {step} role {role} reuses step {src}, which is not earlier"
                            )));
                        }
                        if self.get(src, role) != Some(Decision::Compute) {
                            return Err(Error::PlanIntegrity(format!(
                                "step {step} role {role} reuses step {src}, which was not computed"
                            )));
                        }
                    }
                }
            }
            if let Some(d @ Decision::Reuse(_)) = self.get(1, role) {
                return Err(Error::PlanIntegrity(format!(
                    "step 1 role {role} must compute, found {}",
                    d.symbol()
                )));
            }
        }
        if self
            .decisions
            .keys()
            .any(|&(s, _)| s == 0 || s > self.horizon)
        {
            return Err(Error::PlanIntegrity(
                "decision outside the plan horizon".into(),
            ));
        }
        for step in 1..=self.horizon {
            let enc = self.get(step, BlockRole::CtrlEncoder);
            let mid = self.get(step, BlockRole::CtrlMid);
            if enc.is_some()
                && mid.is_some()
                && (enc == Some(Decision::Skip)) != (mid == Some(Decision::Skip))
            {
                return Err(Error::PlanIntegrity(format!(
                    "step {step}: control encoder and mid must skip together"
                )));
            }
        }
        Ok(())
    }

    /// One `step,role,decision,source` record per entry, ordered by step then role.
    pub fn to_text(&self) -> String {
        let mut out = format!("# horizon={}\nstep,role,decision,source\n", self.horizon);
        for (step, role, d) in self.iter() {
            let (name, src) = match d {
                Decision::Compute => ("compute", String::new()),
                Decision::Reuse(s) => ("reuse", s.to_string()),
                Decision::Skip => ("skip", String::new()),
            };
            out.push_str(&format!("{step},{role},{name},{src}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<CachePlan> {
        let bad = |line: &str| Error::PlanIntegrity(format!("malformed plan record `{line}`"));
        let mut lines = text.lines();
        let horizon = lines
            .next()
            .and_then(|l| l.strip_prefix("# horizon="))
            .and_then(|h| h.trim().parse().ok())
            .ok_or_else(|| Error::PlanIntegrity("missing horizon header".into()))?;
        let mut plan = CachePlan::new(horizon);
        for line in lines.skip(1).filter(|l| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            let [step, role, decision, src] = fields[..] else {
                return Err(bad(line));
            };
            let step: usize = step.parse().map_err(|_| bad(line))?;
            let role: BlockRole = role.parse()?;
            let decision = match (decision, src) {
                ("compute", "") => Decision::Compute,
                ("skip", "") => Decision::Skip,
                ("reuse", s) => Decision::Reuse(s.parse().map_err(|_| bad(line))?),
                _ => return Err(bad(line)),
            };
            plan.set(step, role, decision);
        }
        Ok(plan)
    }

    /// Hex SHA-256 of the text form.
    pub fn digest(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Human-readable step × role grid.
    pub fn grid(&self) -> String {
        let cells: Vec<Vec<String>> = self
            .roles()
            .into_iter()
            .map(|role| {
                (1..=self.horizon)
                    .map(|s| self.get(s, role).map_or("-".into(), Decision::symbol))
                    .collect()
            })
            .collect();
        let width = cells
            .iter()
            .flatten()
            .map(String::len)
            .chain(std::iter::once(self.horizon.to_string().len()))
            .max()
            .unwrap_or(1);
        let mut out = format!("{:<12}", "step");
        for s in 1..=self.horizon {
            out.push_str(&format!(" {s:>width$}"));
        }
        out.push('\n');
        for (role, row) in self.roles().into_iter().zip(cells) {
            out.push_str(&format!("{:<12}", role.as_str()));
            for cell in row {
                out.push_str(&format!(" {cell:>width$}"));
            }
            out.push('\n');
        }
        out
    }
}

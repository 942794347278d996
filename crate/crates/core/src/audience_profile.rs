//! Per-device keyword profiles.
//!
//! `V(s) = rho * F(V(s-1), P(s)) + (1 - rho) * x(s)`, where `F` applies the
//! step's prior assertions and `x` mixes the keywords of the places the
//! device's impressions come from with those of the places it visited.
//! Asserted keywords keep their asserted value after the update.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo_grid::GridConfig;
use crate::location_graph::{clamp_unit, KeywordSchema, KeywordVector, LocationGraph};
use crate::visit_engine::{Impression, Visit};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Assertion {
    Value(f64),
    Clear(ClearTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClearTag {
    Clear,
}

impl Assertion {
    pub const CLEAR: Assertion = Assertion::Clear(ClearTag::Clear);
}

/// Externally supplied facts about a device (for example registration
/// data) observed at `step`. Keys are 0-based keyword indices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PriorRecord {
    pub device_id: String,
    pub step: u64,
    #[serde(default)]
    pub assertions: BTreeMap<usize, Assertion>,
}

impl PriorRecord {
    pub fn empty(device_id: impl Into<String>, step: u64) -> Self {
        PriorRecord {
            device_id: device_id.into(),
            step,
            assertions: BTreeMap::new(),
        }
    }

    pub fn assert(mut self, k: usize, value: f64) -> Self {
        self.assertions.insert(k, Assertion::Value(value));
        self
    }

    pub fn clear(mut self, k: usize) -> Self {
        self.assertions.insert(k, Assertion::CLEAR);
        self
    }

    fn validate(&self, schema: &KeywordSchema) -> Result<()> {
        for (&k, a) in &self.assertions {
            if k >= schema.keywords {
                return Err(Error::data(format!("prior keyword {k} beyond K = {}", schema.keywords)));
            }
            if let Assertion::Value(v) = a {
                if !(0.0..=1.0).contains(v) {
                    return Err(Error::data(format!("prior value {v} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }
}

/// Prior facts currently in force for a device, plus the step at which each
/// exclusive group was last found contradictory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PriorMemory {
    pub asserted: BTreeMap<usize, f64>,
    /// group index -> step of the conflicting record
    pub conflicts: BTreeMap<usize, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub device_id: String,
    pub keywords: KeywordVector,
    pub rho: Vec<f64>,
    pub last_step: u64,
    #[serde(default)]
    pub priors: PriorMemory,
}

impl UserProfile {
    /// Empty profile with the same retention for every keyword.
    pub fn new(device_id: impl Into<String>, k: usize, rho: f64) -> Result<Self> {
        UserProfile::with_rho(device_id, vec![rho; k])
    }

    pub fn with_rho(device_id: impl Into<String>, rho: Vec<f64>) -> Result<Self> {
        if rho.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::config("rho entries must lie in [0, 1]"));
        }
        Ok(UserProfile {
            device_id: device_id.into(),
            keywords: KeywordVector::zeros(rho.len()),
            rho,
            last_step: 0,
            priors: PriorMemory::default(),
        })
    }
}

/// Applies a prior record.
///
/// A value for a keyword outside any exclusive group overwrites it. A
/// positive value for a group member sets the other members to 0, unless
/// another member is already asserted positive: then the whole group is
/// cleared to 0 and stays unasserted until a record with a later step makes
/// a consistent assertion. `clear` drops an assertion so evidence can
/// move the keyword again.
pub fn reconcile_priors(profile: &UserProfile, prior: &PriorRecord, schema: &KeywordSchema) -> Result<UserProfile> {
    if profile.keywords.len() != schema.keywords {
        return Err(Error::data("profile width differs from the keyword schema"));
    }
    prior.validate(schema)?;
    let mut out = profile.clone();
    let mut values = out.keywords.clone().into_inner();
    let mem = &mut out.priors;
    for (&k, assertion) in &prior.assertions {
        let group = schema
            .exclusive_groups
            .iter()
            .position(|g| g.contains(&k));
        match (*assertion, group) {
            (Assertion::Clear(_), _) => {
                mem.asserted.remove(&k);
            }
            (Assertion::Value(x), None) => {
                mem.asserted.insert(k, x);
                values[k] = x;
            }
            (Assertion::Value(x), Some(gi)) => {
                if mem.conflicts.get(&gi).is_some_and(|&s| s >= prior.step) {
                    continue;
                }
                let members = &schema.exclusive_groups[gi];
                let contradicted = x > 0.0
                    && members
                        .iter()
                        .any(|&m| m != k && mem.asserted.get(&m).is_some_and(|&v| v > 0.0));
                if contradicted {
                    for &m in members {
                        mem.asserted.remove(&m);
                        values[m] = 0.0;
                    }
                    mem.conflicts.insert(gi, prior.step);
                } else {
                    mem.conflicts.remove(&gi);
                    mem.asserted.insert(k, x);
                    values[k] = x;
                    if x > 0.0 {
                        for &m in members.iter().filter(|&&m| m != k) {
                            mem.asserted.insert(m, 0.0);
                            values[m] = 0.0;
                        }
                    }
                }
            }
        }
    }
    schema.normalize_row(&mut values, &mem.asserted);
    out.keywords = KeywordVector::clamped(values);
    Ok(out)
}

/// Keyword evidence for one device and step: `f` from where its impressions
/// come from, `g` from the places it visited, and their mix `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpressionFeatureBundle {
    pub f: KeywordVector,
    pub g: KeywordVector,
    pub x: KeywordVector,
}

impl ImpressionFeatureBundle {
    pub fn zeros(k: usize) -> Self {
        ImpressionFeatureBundle {
            f: KeywordVector::zeros(k),
            g: KeywordVector::zeros(k),
            x: KeywordVector::zeros(k),
        }
    }

    /// Bundle whose `x` is `gamma_f * f + gamma_g * g`, clamped.
    pub fn mix(f: KeywordVector, g: KeywordVector, gamma_f: &[f64], gamma_g: &[f64]) -> Self {
        let x = (0..f.len())
            .map(|k| gamma_f[k] * f[k] + gamma_g[k] * g[k])
            .collect();
        ImpressionFeatureBundle {
            x: KeywordVector::clamped(x),
            f,
            g,
        }
    }
}

/// Builds a device's feature bundle for one step window.
///
/// `f` averages, over the device's located impressions, the mean combined
/// keywords of the graph nodes in the impression's 3x3 cell window
/// (impressions with no nearby node are skipped). `g` is the
/// visit-weighted mean of the combined keywords of visited locations.
pub fn derive_features(
    impressions: &[Impression],
    visits: &[Visit],
    graph: &LocationGraph,
    combined: &BTreeMap<String, KeywordVector>,
    gamma_f: &[f64],
    gamma_g: &[f64],
) -> Result<ImpressionFeatureBundle> {
    let k = graph.schema().keywords;
    if gamma_f.len() != k || gamma_g.len() != k {
        return Err(Error::config("gamma vectors must have one entry per keyword"));
    }
    if impressions.is_empty() {
        return Ok(ImpressionFeatureBundle::zeros(k));
    }
    let grid: &GridConfig = graph.grid();
    let mut f = vec![0.0; k];
    let mut used = 0usize;
    for imp in impressions {
        let Some(p) = imp.loc else { continue };
        let pids = graph.window_pids(grid.cell_of(&p));
        let vecs: Vec<&KeywordVector> = pids.iter().filter_map(|pid| combined.get(*pid)).collect();
        if vecs.is_empty() {
            continue;
        }
        for kw in 0..k {
            f[kw] += vecs.iter().map(|v| v[kw]).sum::<f64>() / vecs.len() as f64;
        }
        used += 1;
    }
    if used > 0 {
        f.iter_mut().for_each(|x| *x /= used as f64);
    }

    let mut g = vec![0.0; k];
    let mut total = 0.0;
    for v in visits {
        let w = combined
            .get(&v.pid)
            .ok_or_else(|| Error::UnknownPid(v.pid.clone()))?;
        for kw in 0..k {
            g[kw] += v.weight * w[kw];
        }
        total += v.weight;
    }
    if total > 0.0 {
        g.iter_mut().for_each(|x| *x /= total);
    }
    Ok(ImpressionFeatureBundle::mix(
        KeywordVector::clamped(f),
        KeywordVector::clamped(g),
        gamma_f,
        gamma_g,
    ))
}

/// One profile step: reconcile priors, smooth towards the evidence `x`,
/// then put asserted keywords back and normalize.
pub fn update_profile(
    profile: &UserProfile,
    prior: &PriorRecord,
    bundle: &ImpressionFeatureBundle,
    schema: &KeywordSchema,
) -> Result<UserProfile> {
    if bundle.x.len() != schema.keywords {
        return Err(Error::data("feature bundle width differs from the keyword schema"));
    }
    let mut out = reconcile_priors(profile, prior, schema)?;
    let mut values: Vec<f64> = (0..schema.keywords)
        .map(|k| out.rho[k] * out.keywords[k] + (1.0 - out.rho[k]) * bundle.x[k])
        .collect();
    for (&k, &v) in &out.priors.asserted {
        values[k] = v;
    }
    schema.normalize_row(&mut values, &out.priors.asserted);
    out.keywords = KeywordVector::clamped(values.into_iter().map(clamp_unit).collect());
    out.last_step = out.last_step.max(prior.step);
    Ok(out)
}

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::config::{agreement_weights, AttributeSpec, Comparator, LinkageConfig, MissingPolicy};
use super::LinkageError;
use crate::idmodel::{cologne_phonetic, compare_dates, levenshtein_similarity, Field, NormalizedIdentity, PartialDate};
use crate::pprl::{dice_similarity, BloomEncoder, KeyRing};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AttributeScore {
    pub name: String,
    /// `None` when the value is missing on either side.
    pub similarity: Option<f64>,
    pub weight_contribution: f64,
    /// Attribute of the other record this one was compared with, when an
    /// exchange group permuted it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compared_with: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub group: String,
    /// Attribute of `b` assigned to each member of the group, in member order.
    pub order: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MatchScore {
    pub total: f64,
    pub per_attribute: Vec<AttributeScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutation_used: Option<Vec<GroupAssignment>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Match,
    Possible,
    NonMatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchDecision {
    pub verdict: Verdict,
}

/// Three zones: `total >= upper` matches, `total < lower` does not.
pub fn classify(score: &MatchScore, cfg: &LinkageConfig) -> MatchDecision {
    let verdict = if score.total >= cfg.upper_threshold {
        Verdict::Match
    } else if score.total < cfg.lower_threshold {
        Verdict::NonMatch
    } else {
        Verdict::Possible
    };
    MatchDecision { verdict }
}

#[derive(Debug, Clone, Copy)]
struct PairEval {
    similarity: Option<f64>,
    contribution: f64,
    present: bool,
    weight: f64,
}

/// Fellegi–Sunter scorer for one validated configuration.
#[derive(Debug, Clone)]
pub struct Scorer {
    cfg: LinkageConfig,
    fields: Vec<Field>,
    nominal: Vec<f64>,
    groups: Vec<(String, Vec<usize>)>,
    encoder: Option<BloomEncoder>,
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                go(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

fn contribution(spec: &AttributeSpec, s: f64, observed: Option<&str>) -> f64 {
    let (agree, disagree) = agreement_weights(spec, observed);
    if s >= spec.partial_floor {
        disagree + s * (agree - disagree)
    } else {
        disagree
    }
}

impl Scorer {
    /// `keys` is needed only when the configuration has `BLOOM_DICE`
    /// attributes.
    pub fn new(cfg: LinkageConfig, keys: Option<&KeyRing>) -> Result<Self, LinkageError> {
        cfg.validate()?;
        let fields = cfg.attributes.iter().map(|a| a.resolved_field()).collect::<Result<_, _>>()?;
        let nominal = cfg.attributes.iter().map(|a| agreement_weights(a, None).0).collect();
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, a) in cfg.attributes.iter().enumerate() {
            if let Some(g) = &a.exchange_group {
                groups.entry(g.clone()).or_default().push(i);
            }
        }
        let encoder = if cfg.attributes.iter().any(|a| a.comparator == Comparator::BloomDice) {
            let params = cfg.bloom.clone().expect("validated");
            let keys = keys.ok_or_else(|| {
                LinkageError::Config("BLOOM_DICE attributes need key material".into())
            })?;
            Some(BloomEncoder::new(params, keys)?)
        } else {
            None
        };
        let groups: Vec<(String, Vec<usize>)> = groups.into_iter().filter(|(_, m)| m.len() > 1).collect();
        let mut nominal: Vec<f64> = nominal;
        for (_, members) in &groups {
            let mean = members.iter().map(|&k| nominal[k]).sum::<f64>() / members.len() as f64;
            for &k in members {
                nominal[k] = mean;
            }
        }
        Ok(Scorer { cfg, fields, nominal, groups, encoder })
    }

    pub fn config(&self) -> &LinkageConfig {
        &self.cfg
    }

    /// Similarity in `[0, 1]`, or `None` if the comparator cannot judge.
    pub fn similarity(&self, comparator: Comparator, a: &str, b: &str) -> Option<f64> {
        Some(match comparator {
            Comparator::Exact | Comparator::UniqueId => f64::from(u8::from(a == b)),
            Comparator::Levenshtein => levenshtein_similarity(a, b),
            Comparator::Phonetic => f64::from(u8::from(cologne_phonetic(a) == cologne_phonetic(b))),
            Comparator::Date => {
                let (x, y) = (a.parse::<PartialDate>().ok()?, b.parse::<PartialDate>().ok()?);
                compare_dates(&x, &y).similarity()?
            }
            Comparator::BloomDice => {
                let enc = self.encoder.as_ref()?;
                let (x, y) = (enc.encode(&[a]).ok()?, enc.encode(&[b]).ok()?);
                dice_similarity(&x, &y).ok()?
            }
        })
    }

    /// Specs whose weights apply to attribute `i`: its whole exchange group,
    /// so a pairing scores the same whichever member it lands on.
    fn weight_specs(&self, i: usize) -> Vec<usize> {
        self.groups.iter().find(|(_, m)| m.contains(&i)).map_or_else(|| vec![i], |(_, m)| m.clone())
    }

    fn eval(&self, i: usize, j: usize, va: &[Option<String>], vb: &[Option<String>]) -> PairEval {
        let specs: Vec<&AttributeSpec> = self.weight_specs(i).into_iter().map(|k| &self.cfg.attributes[k]).collect();
        let mean = |f: &dyn Fn(&AttributeSpec) -> f64| specs.iter().map(|s| f(s)).sum::<f64>() / specs.len() as f64;
        let weight = self.nominal[i];
        let policy = self.cfg.attributes[i].missing_policy;
        let missing = || match policy {
            MissingPolicy::IgnoreRenormalize => {
                PairEval { similarity: None, contribution: 0.0, present: false, weight }
            }
            MissingPolicy::Disagree => PairEval {
                similarity: None,
                contribution: mean(&|s| agreement_weights(s, None).1),
                present: true,
                weight,
            },
        };
        let (Some(a), Some(b)) = (&va[i], &vb[j]) else {
            return missing();
        };
        let Some(sim) = self.similarity(self.cfg.attributes[i].comparator, a, b) else {
            return missing();
        };
        // Frequency-based u: take the more common of the two values.
        let observed = |spec: &AttributeSpec| {
            if spec.u_for(Some(a)) >= spec.u_for(Some(b)) { a.clone() } else { b.clone() }
        };
        PairEval {
            similarity: Some(sim),
            contribution: mean(&|s| contribution(s, sim, Some(&observed(s)))),
            present: true,
            weight,
        }
    }

    /// Weighted sum of per-attribute contributions, maximized over the
    /// permutations of every exchange group.
    pub fn score(&self, a: &NormalizedIdentity, b: &NormalizedIdentity) -> MatchScore {
        let va: Vec<Option<String>> = self.fields.iter().map(|f| a.field(*f)).collect();
        let vb: Vec<Option<String>> = self.fields.iter().map(|f| b.field(*f)).collect();
        let n = self.fields.len();

        let perms: Vec<Vec<Vec<usize>>> =
            self.groups.iter().map(|(_, m)| permutations(m.len())).collect();
        let mut choice = vec![0usize; perms.len()];
        let mut cache: HashMap<(usize, usize), PairEval> = HashMap::new();
        let full: f64 = self.nominal.iter().sum();
        let mut best: Option<(f64, Vec<usize>, Vec<usize>)> = None;

        loop {
            let mut target: Vec<usize> = (0..n).collect();
            for (g, (_, members)) in self.groups.iter().enumerate() {
                for (pos, &k) in perms[g][choice[g]].iter().enumerate() {
                    target[members[pos]] = members[k];
                }
            }
            let evals: Vec<PairEval> = (0..n)
                .map(|i| *cache.entry((i, target[i])).or_insert_with(|| self.eval(i, target[i], &va, &vb)))
                .collect();
            let present: f64 = evals.iter().filter(|e| e.present).map(|e| e.weight).sum();
            let scale = if present > 0.0 && present < full { full / present } else { 1.0 };
            let total: f64 = evals.iter().map(|e| e.contribution * scale).sum();
            if best.as_ref().is_none_or(|(t, _, _)| total > *t + 1e-12) {
                best = Some((total, target.clone(), choice.clone()));
            }
            // Odometer over group permutations.
            let mut g = 0;
            while g < choice.len() {
                choice[g] += 1;
                if choice[g] < perms[g].len() {
                    break;
                }
                choice[g] = 0;
                g += 1;
            }
            if g == choice.len() {
                break;
            }
        }

        let (_, target, choice) = best.expect("at least one assignment");
        let evals: Vec<PairEval> = (0..n).map(|i| cache[&(i, target[i])]).collect();
        let present: f64 = evals.iter().filter(|e| e.present).map(|e| e.weight).sum();
        let scale = if present > 0.0 && present < full { full / present } else { 1.0 };
        let per_attribute: Vec<AttributeScore> = evals
            .iter()
            .enumerate()
            .map(|(i, e)| AttributeScore {
                name: self.cfg.attributes[i].name.clone(),
                similarity: e.similarity,
                weight_contribution: e.contribution * scale,
                compared_with: (target[i] != i).then(|| self.cfg.attributes[target[i]].name.clone()),
            })
            .collect();
        let permutation_used = (!self.groups.is_empty()).then(|| {
            self.groups
                .iter()
                .enumerate()
                .map(|(g, (name, members))| GroupAssignment {
                    group: name.clone(),
                    order: perms[g][choice[g]]
                        .iter()
                        .map(|&k| self.cfg.attributes[members[k]].name.clone())
                        .collect(),
                })
                .collect()
        });
        MatchScore {
            total: per_attribute.iter().map(|p| p.weight_contribution).sum(),
            per_attribute,
            permutation_used,
        }
    }

    pub fn classify(&self, score: &MatchScore) -> MatchDecision {
        classify(score, &self.cfg)
    }
}

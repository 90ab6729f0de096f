//! Weighted parameter averaging across checkpoints.

use std::path::{Path, PathBuf};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::io::checkpoint::Checkpoint;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SoupRecipe {
    pub inputs: Vec<(PathBuf, f64)>,
    pub output: PathBuf,
}

impl SoupRecipe {
    /// Parses `path:weight` (weight defaults to 1 when the suffix is absent
    /// or not a number).
    pub fn parse_input(s: &str) -> Result<(PathBuf, f64)> {
        if let Some((p, w)) = s.rsplit_once(':') {
            if let Ok(w) = w.parse::<f64>() {
                if p.is_empty() {
                    return Err(Error::Config(format!("soup input {s:?} has no path")));
                }
                return Ok((PathBuf::from(p), w));
            }
        }
        Ok((PathBuf::from(s), 1.0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::Config("soup needs at least one input".into()));
        }
        check_weights(self.inputs.iter().map(|(_, w)| *w))
    }

    /// Loads the inputs, averages them and writes the output checkpoint.
    pub fn run(&self) -> Result<Checkpoint> {
        self.validate()?;
        let out = soup_files(&self.inputs)?;
        out.save(&self.output)?;
        Ok(out)
    }
}

fn check_weights(weights: impl Iterator<Item = f64>) -> Result<()> {
    for w in weights {
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::Config(format!("soup weight {w} must be positive")));
        }
    }
    Ok(())
}

/// `Σ w_i θ_i / Σ w_i` per coordinate, in f64. Terms are summed in sorted
/// order so the result does not depend on input order.
pub fn soup(inputs: &[(&Checkpoint, f64)]) -> Result<Checkpoint> {
    let (first, _) = *inputs
        .first()
        .ok_or_else(|| Error::Config("soup needs at least one input".into()))?;
    check_weights(inputs.iter().map(|(_, w)| *w))?;
    check_compatible(inputs.iter().map(|(c, _)| *c))?;

    let mut weights: Vec<f64> = inputs.iter().map(|(_, w)| *w).collect();
    weights.sort_by(f64::total_cmp);
    let total: f64 = weights.iter().sum();

    let mut params = std::collections::BTreeMap::new();
    let mut terms = Vec::with_capacity(inputs.len());
    for (name, t) in first.params.iter() {
        let sources: Vec<(&Tensor, f64)> = inputs
            .iter()
            .map(|(c, w)| (c.params.get(name).expect("checked"), *w))
            .collect();
        let data = (0..t.len())
            .map(|i| {
                terms.clear();
                terms.extend(sources.iter().map(|(s, w)| (s.data()[i], *w)));
                terms.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
                terms.iter().map(|(v, w)| w * v).sum::<f64>() / total
            })
            .collect();
        params.insert(name.clone(), Tensor::new(t.shape().to_vec(), data)?);
    }
    Ok(Checkpoint {
        config: first.config.clone(),
        params: EncoderParams::from_map(params),
    })
}

fn check_compatible<'a>(mut cks: impl Iterator<Item = &'a Checkpoint>) -> Result<()> {
    let first = cks.next().expect("non-empty");
    for (i, c) in cks.enumerate() {
        if c.config != first.config {
            return Err(Error::IncompatibleCheckpoint(format!(
                "input {} has a different encoder config",
                i + 1
            )));
        }
        let mut offending: Vec<String> = Vec::new();
        for (name, t) in first.params.iter() {
            match c.params.get(name) {
                Ok(u) if u.shape() == t.shape() => {}
                Ok(u) => offending.push(format!("{name} {:?} vs {:?}", t.shape(), u.shape())),
                Err(_) => offending.push(format!("{name} missing from input {}", i + 1)),
            }
        }
        for name in c.params.names() {
            if first.params.get(name).is_err() {
                offending.push(format!("{name} missing from input 0"));
            }
        }
        if !offending.is_empty() {
            return Err(Error::IncompatibleCheckpoint(offending.join("; ")));
        }
    }
    Ok(())
}

/// Loads and soups without writing, for callers that only want the result.
pub fn soup_files(inputs: &[(impl AsRef<Path>, f64)]) -> Result<Checkpoint> {
    let loaded = inputs
        .iter()
        .map(|(p, w)| Ok((Checkpoint::load(p)?, *w)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<(&Checkpoint, f64)> = loaded.iter().map(|(c, w)| (c, *w)).collect();
    soup(&refs)
}

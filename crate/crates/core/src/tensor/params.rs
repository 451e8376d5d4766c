//! Named trainable parameters and their per-step tape bindings.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

use super::tape::{Tape, Tensor};
use super::value::TensorValue;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: TensorValue,
    /// Bias parameters are excluded from weight decay.
    pub is_bias: bool,
}

/// Stable handle to a parameter in a [`ParamBank`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamRef(pub usize);

/// Owns every trainable tensor of a model. Optimizers walk the bank;
/// forward passes work on a [`BoundParams`] binding produced per step.
#[derive(Clone, Debug, Default)]
pub struct ParamBank {
    entries: Vec<ParamEntry>,
}

impl ParamBank {
    pub fn new() -> Self {
        ParamBank::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: TensorValue, is_bias: bool) -> ParamRef {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            is_bias,
        });
        ParamRef(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, r: ParamRef) -> &TensorValue {
        &self.entries[r.0].value
    }

    pub fn set_value(&mut self, r: ParamRef, v: TensorValue) {
        assert_eq!(
            self.entries[r.0].value.shape(),
            v.shape(),
            "parameter {} shape change",
            self.entries[r.0].name
        );
        self.entries[r.0].value = v;
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, r: ParamRef) -> &ParamEntry {
        &self.entries[r.0]
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Register every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self
                .entries
                .iter()
                .map(|e| tape.leaf(e.value.clone()))
                .collect(),
        }
    }

    /// Copy of all current values, e.g. for EMA shadows or checkpoints.
    pub fn snapshot(&self) -> Vec<TensorValue> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    /// Current values keyed by parameter index, for constant (no-gradient)
    /// forward passes.
    pub fn frozen_map(&self) -> std::collections::HashMap<usize, TensorValue> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (i, e.value.clone()))
            .collect()
    }

    pub fn restore(&mut self, snapshot: &[TensorValue]) {
        assert_eq!(snapshot.len(), self.entries.len());
        for (e, v) in self.entries.iter_mut().zip(snapshot) {
            e.value = v.clone();
        }
    }

    /// Flatten all parameters into one vector (bank order, row-major).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for e in &self.entries {
            out.extend_from_slice(e.value.data());
        }
        out
    }

    /// Inverse of [`flatten`]; input length must match exactly.
    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut offset = 0usize;
        for e in self.entries.iter_mut() {
            let n = e.value.len();
            e.value = TensorValue::new(e.value.shape().to_vec(), flat[offset..offset + n].to_vec());
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    /// Write the versioned checkpoint format:
    /// one header line `version,<n>`, then `name,is_bias,shape,data` rows
    /// with `x`-separated extents and `;`-separated values (shortest
    /// round-trip float formatting).
    pub fn save_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "version,{CHECKPOINT_FORMAT_VERSION}")?;
        writeln!(w, "name,is_bias,shape,data")?;
        for e in &self.entries {
            let shape = e
                .value
                .shape()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            let data = e
                .value
                .data()
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(";");
            writeln!(w, "{},{},{},{}", e.name, u8::from(e.is_bias), shape, data)?;
        }
        Ok(())
    }

    pub fn load_checkpoint(r: impl BufRead) -> Result<ParamBank> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Config("empty checkpoint".into()))??;
        let version = header
            .strip_prefix("version,")
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| Error::Config(format!("bad checkpoint header: {header}")))?;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let _columns = lines
            .next()
            .ok_or_else(|| Error::Config("truncated checkpoint".into()))??;
        let mut bank = ParamBank::new();
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.splitn(4, ',');
            let (name, bias, shape, data) = (
                fields.next().unwrap_or_default(),
                fields.next().unwrap_or_default(),
                fields.next().unwrap_or_default(),
                fields.next().unwrap_or_default(),
            );
            let shape: Vec<usize> = if shape.is_empty() {
                vec![]
            } else {
                shape
                    .split('x')
                    .map(|d| {
                        d.parse()
                            .map_err(|_| Error::Config(format!("bad shape in checkpoint: {shape}")))
                    })
                    .collect::<Result<_>>()?
            };
            let values: Vec<f64> = if data.is_empty() {
                vec![]
            } else {
                data.split(';')
                    .map(|v| {
                        v.parse()
                            .map_err(|_| Error::Config(format!("bad value in checkpoint: {v}")))
                    })
                    .collect::<Result<_>>()?
            };
            if shape.iter().product::<usize>() != values.len() {
                return Err(Error::Config(format!(
                    "checkpoint row {name}: shape/data mismatch"
                )));
            }
            bank.push(name, TensorValue::new(shape, values), bias == "1");
        }
        Ok(bank)
    }
}

/// Per-step binding of every parameter to a tape leaf.
pub struct BoundParams {
    vars: Vec<Tensor>,
}

impl BoundParams {
    pub fn get(&self, r: ParamRef) -> &Tensor {
        &self.vars[r.0]
    }

    pub fn vars(&self) -> &[Tensor] {
        &self.vars
    }
}

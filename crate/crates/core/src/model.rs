//! The assembled registration network and its parameter accounting.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::decoder::Decoder;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamRegistry, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::warp::as_channels;

#[derive(Clone, Debug)]
pub struct NestedMorph {
    cfg: ModelConfig,
    registry: ParamRegistry,
    encoder: Encoder,
    decoder: Decoder,
}

impl NestedMorph {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut registry = ParamRegistry::new();
        let encoder = Encoder::new(&mut registry, "encoder", &cfg.encoder, &cfg.attention)?;
        let decoder = Decoder::new(&mut registry, "decoder", &cfg.decoder, &cfg.encoder, &cfg.attention)?;
        Ok(Self {
            cfg: cfg.clone(),
            registry,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn registry(&self) -> &ParamRegistry {
        &self.registry
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// Parameters drawn from `cfg.seed`.
    pub fn init<T: Scalar>(&self) -> ParamStore<T> {
        self.registry.initialize(self.cfg.seed)
    }

    /// Displacement `[3, D, H, W]` for `[1, D, H, W]` moving/fixed volumes.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, moving: Var, fixed: Var) -> Result<Var> {
        let pyramid = self.encoder.forward(tape, p, moving, fixed)?;
        self.decoder.forward(tape, p, &pyramid)
    }

    /// Inference without gradient bookkeeping.
    pub fn predict<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        moving: &Tensor<T>,
        fixed: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        self.check_params(params)?;
        let mut tape = Tape::new();
        let p = params.bind_frozen(&mut tape);
        let m = tape.constant(as_channels(moving)?);
        let f = tape.constant(as_channels(fixed)?);
        let field = self.forward(&mut tape, &p, m, f)?;
        Ok(tape.value(field).clone())
    }

    /// Errors unless `params` holds exactly the declared names and shapes.
    pub fn check_params<T: Scalar>(&self, params: &ParamStore<T>) -> Result<()> {
        let specs = self.registry.specs();
        if params.len() != specs.len() {
            return Err(Error::Config(format!(
                "parameter set has {} tensors, model declares {}",
                params.len(),
                specs.len()
            )));
        }
        for s in specs {
            match params.get(&s.name) {
                Some(t) if t.shape() == s.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Config(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        s.name,
                        t.shape(),
                        s.shape
                    )))
                }
                None => return Err(Error::Config(format!("parameter {} missing", s.name))),
            }
        }
        Ok(())
    }

    pub fn param_table(&self) -> ParamTable {
        ParamTable::from_registry(&self.registry)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRow {
    pub module: String,
    pub count: usize,
}

/// Parameter counts grouped as Encoder, DAE-Former i, LKA-Former i, Other.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamTable {
    pub rows: Vec<ParamRow>,
    pub total: usize,
}

fn module_of(name: &str) -> (u8, usize, String) {
    let mut parts = name.split('.');
    match (parts.next(), parts.next()) {
        (Some("encoder"), _) => (0, 0, "Encoder".into()),
        (Some("decoder"), Some(stage)) => {
            let idx = |p: &str| stage[p.len()..].parse::<usize>().ok();
            if let Some(i) = stage.strip_prefix("dae").and(idx("dae")) {
                (1, i, format!("DAE-Former {i}"))
            } else if let Some(i) = stage.strip_prefix("lka").and(idx("lka")) {
                (2, i, format!("LKA-Former {i}"))
            } else {
                (3, 0, "Other".into())
            }
        }
        _ => (3, 0, "Other".into()),
    }
}

impl ParamTable {
    pub fn from_registry(reg: &ParamRegistry) -> Self {
        let mut groups: std::collections::BTreeMap<(u8, usize), ParamRow> = Default::default();
        for s in reg.specs() {
            let (kind, i, module) = module_of(&s.name);
            groups
                .entry((kind, i))
                .or_insert(ParamRow { module, count: 0 })
                .count += s.numel();
        }
        let rows: Vec<ParamRow> = groups.into_values().collect();
        let total = rows.iter().map(|r| r.count).sum();
        Self { rows, total }
    }

    pub fn get(&self, module: &str) -> Option<usize> {
        self.rows.iter().find(|r| r.module == module).map(|r| r.count)
    }

    /// Aligned text table.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.module.len()).max().unwrap_or(0).max(5);
        let mut out = format!("{:<width$}  {:>12}\n", "Module", "Parameters");
        for r in &self.rows {
            out += &format!("{:<width$}  {:>12}\n", r.module, r.count);
        }
        out += &format!("{:<width$}  {:>12}\n", "Total", self.total);
        out
    }
}

/// Parameter table for a configuration without materializing weights.
pub fn count_params(cfg: &ModelConfig) -> Result<ParamTable> {
    Ok(NestedMorph::new(cfg)?.param_table())
}

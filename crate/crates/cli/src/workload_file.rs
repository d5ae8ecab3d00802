//! `workload.jsonl`: a header with everything needed to rebuild the
//! simulator next to `schema.jsonl`, then one binding list per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use pqo::jsonl::{self, FORMAT_VERSION};
use pqo::simdb::{CostModel, Schema, ScenarioKind, SimDb};
use pqo::{Error, ParamValue, Provenance, QueryInstance, QueryTemplate, Result, Workload};
use serde::{Deserialize, Serialize};

const KIND: &str = "workload";

#[derive(Clone, Debug, PartialEq)]
pub struct WorkloadFile {
    pub scenario: ScenarioKind,
    pub template: QueryTemplate,
    pub cost_model: CostModel,
    pub noise_level: f64,
    pub provenance: Provenance,
    pub workload: Workload,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u64,
    kind: String,
    scenario: ScenarioKind,
    template: QueryTemplate,
    cost_model: CostModel,
    noise_level: f64,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Line {
    bindings: Vec<ParamValue>,
}

impl WorkloadFile {
    pub fn simdb(&self, schema: &Schema) -> Result<SimDb> {
        SimDb::new(schema.clone(), self.template.clone(), self.cost_model.clone(), self.noise_level)
    }

    pub fn to_writer<W: Write>(&self, out: &mut W) -> Result<()> {
        let h = Header {
            format_version: FORMAT_VERSION,
            kind: KIND.into(),
            scenario: self.scenario,
            template: self.template.clone(),
            cost_model: self.cost_model.clone(),
            noise_level: self.noise_level,
            provenance: self.provenance.clone(),
        };
        jsonl::write_line(out, &h)?;
        for q in &self.workload.instances {
            jsonl::write_line(out, &Line { bindings: q.bindings.clone() })?;
        }
        Ok(())
    }

    pub fn from_reader<R: BufRead>(input: R) -> Result<Self> {
        let (h, lines): (Header, Vec<Line>) = jsonl::read_lines(input)?;
        if h.kind != KIND {
            return Err(Error::Format { line: 1, message: format!("expected kind `{KIND}`, found `{}`", h.kind) });
        }
        let id = h.template.template_id().to_string();
        let mut instances = Vec::with_capacity(lines.len());
        for (i, l) in lines.into_iter().enumerate() {
            let q = QueryInstance::new(id.clone(), l.bindings);
            q.check(&h.template).map_err(|e| Error::Format { line: i + 2, message: e.to_string() })?;
            instances.push(q);
        }
        Ok(WorkloadFile {
            scenario: h.scenario,
            workload: Workload::new(id, instances)?,
            template: h.template,
            cost_model: h.cost_model,
            noise_level: h.noise_level,
            provenance: h.provenance,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.to_writer(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_reader(BufReader::new(File::open(path)?))
    }
}

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CURVES_CSV_HEADER: &str = "model,lambda,step_frames,al,dal,bleu,token_accuracy";

/// One (checkpoint, step size) evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub model: String,
    pub lambda: f64,
    pub step_frames: usize,
    pub al: f64,
    pub dal: f64,
    pub bleu: f64,
    pub token_accuracy: f64,
}

impl CurvePoint {
    fn check(&self) -> Result<()> {
        let all = [self.lambda, self.al, self.dal, self.bleu, self.token_accuracy];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite metric in curve point {} λ={} step={}",
                self.model, self.lambda, self.step_frames
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurveMeta {
    pub seed: u64,
    pub dataset_hash: String,
    /// Seconds since the Unix epoch when the set was written.
    pub timestamp: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub meta: CurveMeta,
    pub points: Vec<CurvePoint>,
}

impl CurveSet {
    /// Fixed output order: model, then λ, then step size.
    pub fn sort(&mut self) {
        self.points.sort_by(|a, b| {
            a.model
                .cmp(&b.model)
                .then(a.lambda.total_cmp(&b.lambda))
                .then(a.step_frames.cmp(&b.step_frames))
        });
    }

    pub fn validate(&self) -> Result<()> {
        self.points.iter().try_for_each(CurvePoint::check)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.points {
            w.serialize(p).map_err(csv_err)?;
        }
        if self.points.is_empty() {
            w.write_record(CURVES_CSV_HEADER.split(',')).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Points only; the CSV carries no metadata.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        if header.join(",") != CURVES_CSV_HEADER {
            return Err(Error::Input(format!("unexpected curves header `{}`", header.join(","))));
        }
        let points = r
            .deserialize()
            .collect::<std::result::Result<Vec<CurvePoint>, _>>()
            .map_err(csv_err)?;
        let set = CurveSet {
            meta: CurveMeta::default(),
            points,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: CurveSet = serde_json::from_str(text)?;
        set.validate()?;
        Ok(set)
    }

    /// Writes `curves.json` and `curves.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::File::create(dir.join("curves.json"))?.write_all(self.to_json()?.as_bytes())?;
        fs::File::create(dir.join("curves.csv"))?.write_all(self.to_csv()?.as_bytes())?;
        Ok(())
    }

    /// Reads a `.csv` or JSON curves file.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "csv") {
            Self::from_csv(&text)
        } else {
            Self::from_json(&text)
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Input(format!("curves csv: {e}"))
}

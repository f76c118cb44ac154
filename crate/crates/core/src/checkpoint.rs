//! Checkpoint serialization.
//!
//! Little-endian binary layout (all integers and floats little-endian):
//!
//! ```text
//! magic            8 bytes  b"AELCKPT1"
//! config_len       u32      followed by that many bytes of resolved config text
//! rng_seed         u64      master seed (all random streams derive from
//!                           (seed, step, purpose, slot), so no generator
//!                           state needs to be carried)
//! step             u64
//! max_iter         u64
//! base_lr          f64
//! teacher_momentum f64
//! classes          u32
//! feature_dim      u32
//! student          classes * feature_dim f64
//! teacher          classes * feature_dim f64
//! bank_kind        u8       0 = confidence, 1 = margin, 2 = entropy
//! bank_tau         f64
//! bank entries     classes * (u32 class_id, f64 value, u8 observed)
//! dict_len         u64      presence dictionary entries, sorted by image id
//!   per entry: image_id u64, class_count u32, class ids u8 each
//! tail_len         u32      tail class ids, u32 each
//! ledger_classes   u32
//! ledger_rows      u64
//!   per row: step u64, ledger_classes * u64 cumulative counts
//! ```
//!
//! A checkpoint carries the full mutable training state, so resuming replays
//! the uninterrupted run bit-exactly.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::aug::PresenceDictionary;
use crate::bank::{ConfidenceBank, IndicatorKind};
use crate::error::{Error, Result};
use crate::metrics::{LedgerRow, SampleLedger};
use crate::model::{ModelWeights, TrainState, FEATURE_DIM};

const MAGIC: &[u8; 8] = b"AELCKPT1";

/// Everything needed to continue (or evaluate) a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_text: String,
    pub rng_seed: u64,
    pub state: TrainState,
    pub bank: ConfidenceBank,
    pub dict: PresenceDictionary,
    pub tail_classes: Vec<usize>,
    pub ledger: SampleLedger,
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.0.write_all(&[v])?)
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn bytes(&mut self, v: &[u8]) -> Result<()> {
        Ok(self.0.write_all(v)?)
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.0.read_exact(&mut b)?;
        Ok(b[0])
    }
    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.0.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut v = vec![0u8; n];
        self.0.read_exact(&mut v)?;
        Ok(v)
    }
}

fn kind_code(kind: IndicatorKind) -> u8 {
    match kind {
        IndicatorKind::Confidence => 0,
        IndicatorKind::Margin => 1,
        IndicatorKind::Entropy => 2,
    }
}

fn kind_from_code(code: u8) -> Result<IndicatorKind> {
    match code {
        0 => Ok(IndicatorKind::Confidence),
        1 => Ok(IndicatorKind::Margin),
        2 => Ok(IndicatorKind::Entropy),
        other => Err(Error::Checkpoint(format!("unknown indicator code {other}"))),
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = std::fs::File::create(path)?;
        let mut w = Writer(std::io::BufWriter::new(file));
        w.bytes(MAGIC)?;
        let config = self.config_text.as_bytes();
        w.u32(config.len() as u32)?;
        w.bytes(config)?;
        w.u64(self.rng_seed)?;
        w.u64(self.state.step as u64)?;
        w.u64(self.state.max_iter as u64)?;
        w.f64(self.state.base_lr)?;
        w.f64(self.state.teacher_momentum)?;
        let classes = self.state.student.classes();
        w.u32(classes as u32)?;
        w.u32(FEATURE_DIM as u32)?;
        for &v in self.state.student.values() {
            w.f64(v)?;
        }
        for &v in self.state.teacher.values() {
            w.f64(v)?;
        }
        w.u8(kind_code(self.bank.kind()))?;
        w.f64(self.bank.tau())?;
        for c in 0..classes {
            w.u32(c as u32)?;
            w.f64(self.bank.values()[c])?;
            w.u8(self.bank.observed()[c] as u8)?;
        }
        let entries: Vec<_> = self.dict.entries().collect();
        w.u64(entries.len() as u64)?;
        for (id, set) in entries {
            w.u64(*id)?;
            w.u32(set.len() as u32)?;
            for &c in set {
                w.u8(c)?;
            }
        }
        w.u32(self.tail_classes.len() as u32)?;
        for &c in &self.tail_classes {
            w.u32(c as u32)?;
        }
        w.u32(self.ledger.classes() as u32)?;
        w.u64(self.ledger.rows().len() as u64)?;
        for row in self.ledger.rows() {
            w.u64(row.step)?;
            for &n in &row.cumulative {
                w.u64(n)?;
            }
        }
        w.0.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            message: format!("cannot open checkpoint: {e}"),
        })?;
        let mut r = Reader(std::io::BufReader::new(file));
        let magic = r.bytes(8)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let config_len = r.u32()? as usize;
        let config_text = String::from_utf8(r.bytes(config_len)?)
            .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        let rng_seed = r.u64()?;
        let step = r.u64()? as usize;
        let max_iter = r.u64()? as usize;
        let base_lr = r.f64()?;
        let teacher_momentum = r.f64()?;
        let classes = r.u32()? as usize;
        let feature_dim = r.u32()? as usize;
        if feature_dim != FEATURE_DIM {
            return Err(Error::Checkpoint(format!(
                "feature dim {feature_dim} differs from build ({FEATURE_DIM})"
            )));
        }
        let read_weights = |r: &mut Reader<_>| -> Result<ModelWeights> {
            let mut v = Vec::with_capacity(classes * FEATURE_DIM);
            for _ in 0..classes * FEATURE_DIM {
                v.push(r.f64()?);
            }
            ModelWeights::from_values(classes, v)
        };
        let student = read_weights(&mut r)?;
        let teacher = read_weights(&mut r)?;
        let kind = kind_from_code(r.u8()?)?;
        let tau = r.f64()?;
        let mut values = vec![0.0; classes];
        let mut observed = vec![false; classes];
        for _ in 0..classes {
            let class_id = r.u32()? as usize;
            if class_id >= classes {
                return Err(Error::Checkpoint(format!("bank class id {class_id} out of range")));
            }
            values[class_id] = r.f64()?;
            observed[class_id] = r.u8()? != 0;
        }
        let bank = ConfidenceBank::from_parts(kind, tau, values, observed)?;

        let dict_len = r.u64()? as usize;
        let state_cfg: crate::config::RunConfig = {
            let mut cfg = crate::config::RunConfig::default();
            cfg.apply_text(&config_text)?;
            cfg
        };
        let mut dict = PresenceDictionary::new(state_cfg.r_star);
        for _ in 0..dict_len {
            let id = r.u64()?;
            let n = r.u32()? as usize;
            let mut set = BTreeSet::new();
            for _ in 0..n {
                set.insert(r.u8()?);
            }
            dict.insert_entry(id, set);
        }
        let tail_len = r.u32()? as usize;
        let mut tail_classes = Vec::with_capacity(tail_len);
        for _ in 0..tail_len {
            tail_classes.push(r.u32()? as usize);
        }
        let ledger_classes = r.u32()? as usize;
        let row_count = r.u64()? as usize;
        let mut rows = Vec::with_capacity(row_count);
        for _ in 0..row_count {
            let step = r.u64()?;
            let mut cumulative = Vec::with_capacity(ledger_classes);
            for _ in 0..ledger_classes {
                cumulative.push(r.u64()?);
            }
            rows.push(LedgerRow { step, cumulative });
        }
        let ledger = SampleLedger::from_rows(ledger_classes, rows)?;

        Ok(Checkpoint {
            config_text,
            rng_seed,
            state: TrainState {
                student,
                teacher,
                step,
                max_iter,
                base_lr,
                teacher_momentum,
            },
            bank,
            dict,
            tail_classes,
            ledger,
        })
    }
}

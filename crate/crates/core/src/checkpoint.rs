//! Session checkpoints (`CRCLCK1`): learner states, analytic statistics,
//! RNG position and the results recorded so far.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analytic::SuffStats;
use crate::backbone::{Adapter, AdapterSet};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::experiment::SessionRecord;
use crate::learners::{LearnerState, Role};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"CRCLCK1";

/// Everything needed to continue a run after session `session`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub session: usize,
    /// Digest of the canonical config the run was started with.
    pub config_digest: u64,
    pub rng: ChaCha8Rng,
    pub beta: f64,
    pub conservative: LearnerState,
    pub stats_conservative: SuffStats,
    /// Absent until session two.
    pub radical: Option<(LearnerState, SuffStats)>,
    pub records: Vec<SessionRecord>,
    pub warnings: Vec<String>,
}

fn write_adapters<W: Write>(w: &mut Writer<W>, set: &AdapterSet) -> Result<()> {
    w.u64(set.len() as u64)?;
    for a in set.adapters() {
        w.matrix(&a.w_down)?;
        w.matrix(&a.w_up)?;
    }
    Ok(())
}

fn read_adapters<R: Read>(r: &mut Reader<R>) -> Result<AdapterSet> {
    let n = r.usize()?;
    let mut adapters = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let w_down = r.matrix()?;
        let w_up = r.matrix_of(w_down.cols(), w_down.rows(), "W_up")?;
        adapters.push(Adapter { w_down, w_up });
    }
    Ok(AdapterSet::new(adapters))
}

fn write_stats<W: Write>(w: &mut Writer<W>, s: &SuffStats) -> Result<()> {
    w.matrix(&s.gram)?;
    w.matrix(&s.cross)?;
    w.u64(s.count as u64)
}

fn read_stats<R: Read>(r: &mut Reader<R>) -> Result<SuffStats> {
    let gram = r.matrix()?;
    let cross = r.matrix()?;
    if gram.rows() != gram.cols() || cross.rows() != gram.rows() {
        return Err(r.format_error("sufficient statistics have inconsistent shapes"));
    }
    Ok(SuffStats {
        gram,
        cross,
        count: r.usize()?,
    })
}

fn write_learner<W: Write>(w: &mut Writer<W>, s: &LearnerState) -> Result<()> {
    write_adapters(w, &s.adapters)?;
    w.matrix(&s.classifier)
}

fn read_learner<R: Read>(r: &mut Reader<R>, role: Role) -> Result<LearnerState> {
    Ok(LearnerState {
        adapters: read_adapters(r)?,
        classifier: r.matrix()?,
        role,
    })
}

fn write_option<W: Write>(w: &mut Writer<W>, v: Option<f64>) -> Result<()> {
    w.u64(u64::from(v.is_some()))?;
    w.f64(v.unwrap_or(0.0))
}

fn read_option<R: Read>(r: &mut Reader<R>) -> Result<Option<f64>> {
    let flag = r.u64()?;
    let v = r.f64()?;
    match flag {
        0 => Ok(None),
        1 => Ok(Some(v)),
        _ => Err(r.format_error("bad option flag")),
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Writer::new(BufWriter::new(file), path);
        w.magic(CHECKPOINT_MAGIC)?;
        w.u64(self.session as u64)?;
        w.u64(self.config_digest)?;
        w.bytes(&self.rng.get_seed())?;
        w.u64(self.rng.get_stream())?;
        let pos = self.rng.get_word_pos();
        w.u64((pos >> 64) as u64)?;
        w.u64(pos as u64)?;
        w.f64(self.beta)?;
        write_learner(&mut w, &self.conservative)?;
        write_stats(&mut w, &self.stats_conservative)?;
        w.u64(u64::from(self.radical.is_some()))?;
        if let Some((state, stats)) = &self.radical {
            write_learner(&mut w, state)?;
            write_stats(&mut w, stats)?;
        }
        w.u64(self.records.len() as u64)?;
        for rec in &self.records {
            w.u64(rec.session as u64)?;
            w.u64(rec.classes_seen as u64)?;
            w.f64(rec.accuracy)?;
            write_option(&mut w, rec.fused_fraction)?;
            write_option(&mut w, rec.theta_div)?;
        }
        w.u64(self.warnings.len() as u64)?;
        for warning in &self.warnings {
            w.bytes(warning.as_bytes())?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader::new(BufReader::new(file), path);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let session = r.usize()?;
        let config_digest = r.u64()?;
        let seed: [u8; 32] = r
            .bytes()?
            .try_into()
            .map_err(|_| r.format_error("RNG seed must be 32 bytes"))?;
        let stream = r.u64()?;
        let hi = r.u64()?;
        let lo = r.u64()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos((u128::from(hi) << 64) | u128::from(lo));
        let beta = r.f64()?;
        let conservative = read_learner(&mut r, Role::Conservative)?;
        let stats_conservative = read_stats(&mut r)?;
        let radical = match r.u64()? {
            0 => None,
            1 => Some((read_learner(&mut r, Role::Radical)?, read_stats(&mut r)?)),
            _ => return Err(r.format_error("bad radical flag")),
        };
        let n = r.usize()?;
        let mut records = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            records.push(SessionRecord {
                session: r.usize()?,
                classes_seen: r.usize()?,
                accuracy: r.f64()?,
                fused_fraction: read_option(&mut r)?,
                theta_div: read_option(&mut r)?,
            });
        }
        let n = r.usize()?;
        let mut warnings = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            warnings.push(r.string()?);
        }
        r.expect_eof()?;
        Ok(Self {
            session,
            config_digest,
            rng,
            beta,
            conservative,
            stats_conservative,
            radical,
            records,
            warnings,
        })
    }
}

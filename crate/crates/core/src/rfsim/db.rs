use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Band, RSSI_MIN};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    Measured,
    Lost,
    RecoveredDual,
    RecoveredShift,
    Resurveyed,
    Abnormal,
}

impl Flag {
    /// Whether the value is a usable reading (not a -100 placeholder or a
    /// known-bad sample).
    pub fn is_valid(self) -> bool {
        !matches!(self, Flag::Lost | Flag::Abnormal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FingerprintSample {
    pub epoch: u32,
    pub region_id: usize,
    #[serde(rename = "x_m")]
    pub x: f64,
    #[serde(rename = "y_m")]
    pub y: f64,
    pub ap_id: u32,
    pub band: Band,
    /// dBm; -100 when lost.
    #[serde(rename = "rssi_dbm")]
    pub rssi: f64,
    pub flag: Flag,
    #[serde(rename = "t_s")]
    pub t: f64,
}

impl FingerprintSample {
    pub fn pos(&self) -> (f64, f64) {
        (self.x, self.y)
    }

    pub fn is_lost(&self) -> bool {
        self.flag == Flag::Lost
    }

    pub fn lost(mut self) -> Self {
        self.rssi = RSSI_MIN;
        self.flag = Flag::Lost;
        self
    }
}

/// Samples sharing a survey location, as indices into the database.
#[derive(Debug, Clone, PartialEq)]
pub struct Location {
    pub region_id: usize,
    pub x: f64,
    pub y: f64,
    pub samples: Vec<usize>,
}

impl Location {
    pub fn pos(&self) -> (f64, f64) {
        (self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FingerprintDatabase {
    pub epoch: u32,
    pub samples: Vec<FingerprintSample>,
}

type LocKey = (usize, u64, u64);

fn loc_key(s: &FingerprintSample) -> LocKey {
    (s.region_id, s.x.to_bits(), s.y.to_bits())
}

impl FingerprintDatabase {
    pub fn new(epoch: u32) -> Self {
        Self {
            epoch,
            samples: Vec::new(),
        }
    }

    /// Locations in order of first appearance.
    pub fn locations(&self) -> Vec<Location> {
        let mut index: HashMap<LocKey, usize> = HashMap::new();
        let mut out: Vec<Location> = Vec::new();
        for (i, s) in self.samples.iter().enumerate() {
            let k = *index.entry(loc_key(s)).or_insert_with(|| {
                out.push(Location {
                    region_id: s.region_id,
                    x: s.x,
                    y: s.y,
                    samples: Vec::new(),
                });
                out.len() - 1
            });
            out[k].samples.push(i);
        }
        out
    }

    /// Index of the sample for `(ap_id, band)` at a location, if any.
    pub fn find_at(&self, loc: &Location, ap_id: u32, band: Band) -> Option<usize> {
        loc.samples
            .iter()
            .copied()
            .find(|&i| self.samples[i].ap_id == ap_id && self.samples[i].band == band)
    }

    pub fn ap_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.samples.iter().map(|s| s.ap_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn region_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.samples.iter().map(|s| s.region_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn count_flag(&self, flag: Flag) -> usize {
        self.samples.iter().filter(|s| s.flag == flag).count()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for s in &self.samples {
            w.serialize(s)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut samples = Vec::new();
        for rec in r.deserialize() {
            let s: FingerprintSample = rec?;
            if !(RSSI_MIN..=0.0).contains(&s.rssi) {
                return Err(Error::Parse(format!("rssi {} outside [-100, 0]", s.rssi)));
            }
            samples.push(s);
        }
        let epoch = samples.first().map_or(0, |s| s.epoch);
        if samples.iter().any(|s| s.epoch != epoch) {
            return Err(Error::Parse("database mixes epochs".into()));
        }
        Ok(Self { epoch, samples })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

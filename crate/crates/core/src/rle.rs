//! Row-major run-length encoding of binary masks. Runs alternate
//! background/foreground and always start with a (possibly empty)
//! background run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Mask2D, Plane};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: usize,
    pub height: usize,
    pub runs: Vec<usize>,
}

pub fn rle_encode(m: &Mask2D) -> RleMask {
    let mut runs = Vec::new();
    let mut current = 0u8;
    let mut len = 0;
    for &v in &m.data {
        let v = u8::from(v != 0);
        if v != current {
            runs.push(len);
            current = v;
            len = 0;
        }
        len += 1;
    }
    runs.push(len);
    RleMask { width: m.width, height: m.height, runs }
}

pub fn rle_decode(r: &RleMask) -> Result<Mask2D> {
    let total: usize = r.runs.iter().sum();
    if total != r.width * r.height {
        return Err(Error::Rle(format!("runs cover {total} pixels, mask has {}", r.width * r.height)));
    }
    let mut data = Vec::with_capacity(total);
    for (i, &len) in r.runs.iter().enumerate() {
        data.extend(std::iter::repeat_n((i % 2) as u8, len));
    }
    Ok(Plane { width: r.width, height: r.height, data })
}

impl RleMask {
    /// Space-separated run lengths; the dimensions travel separately.
    pub fn runs_string(&self) -> String {
        self.runs.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(" ")
    }

    pub fn from_runs_string(s: &str, width: usize, height: usize) -> Result<Self> {
        let runs = s
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| Error::Rle(format!("bad run length {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let r = Self { width, height, runs };
        rle_decode(&r)?;
        Ok(r)
    }
}

use crate::error::{Error, Result};
use crate::model::PriorKind;

pub const MAGIC: &[u8; 4] = b"ENTS";
pub const VERSION: u8 = 1;

/// Self-describing coded latent of one sample.
///
/// Layout: magic, version `u8`, prior kind `u8`, latent shape as four
/// little-endian `u16` (`N, C, H, W`, `N = 1`), hyper-latent shape likewise
/// (zeros for the factorized prior), one little-endian `u32` length per
/// payload, then the payloads. The factorized prior has one payload; the
/// hyperprior has two, hyper-latent first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub prior_kind: PriorKind,
    pub shape: [usize; 3],
    pub hyper_shape: Option<[usize; 3]>,
    pub payloads: Vec<Vec<u8>>,
}

fn payload_count(kind: PriorKind) -> usize {
    match kind {
        PriorKind::Fp => 1,
        PriorKind::Mshp => 2,
    }
}

impl Bitstream {
    pub fn header_len(&self) -> usize {
        4 + 1 + 1 + 8 + 8 + 4 * self.payloads.len()
    }

    pub fn payload_len(&self) -> usize {
        self.payloads.iter().map(Vec::len).sum()
    }

    /// Total size of the serialized stream, header included.
    pub fn coded_size_bytes(&self) -> usize {
        self.header_len() + self.payload_len()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.payloads.len() != payload_count(self.prior_kind) {
            return Err(Error::Format(format!(
                "{} stream needs {} payloads, has {}",
                self.prior_kind,
                payload_count(self.prior_kind),
                self.payloads.len()
            )));
        }
        let mut out = Vec::with_capacity(self.coded_size_bytes());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.prior_kind.code());
        write_shape(&mut out, Some(self.shape))?;
        write_shape(&mut out, self.hyper_shape)?;
        for p in &self.payloads {
            let len = u32::try_from(p.len()).map_err(|_| Error::Format("payload over 4 GiB".into()))?;
            out.extend_from_slice(&len.to_le_bytes());
        }
        for p in &self.payloads {
            out.extend_from_slice(p);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let prior_kind = PriorKind::from_code(r.u8()?)?;
        let shape = r.shape()?.ok_or_else(|| Error::Format("empty latent shape".into()))?;
        let hyper_shape = r.shape()?;
        if (prior_kind == PriorKind::Mshp) != hyper_shape.is_some() {
            return Err(Error::Format("hyper shape does not match prior kind".into()));
        }
        let lens = (0..payload_count(prior_kind))
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let payloads = lens.iter().map(|&n| r.take(n).map(<[u8]>::to_vec)).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Bitstream { prior_kind, shape, hyper_shape, payloads })
    }
}

fn write_shape(out: &mut Vec<u8>, shape: Option<[usize; 3]>) -> Result<()> {
    let dims = match shape {
        Some([c, h, w]) => [1, c, h, w],
        None => [0; 4],
    };
    for d in dims {
        let d = u16::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u16")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated stream".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    /// `None` for an all-zero shape; `N` must otherwise be 1.
    fn shape(&mut self) -> Result<Option<[usize; 3]>> {
        let d = [self.u16()?, self.u16()?, self.u16()?, self.u16()?].map(usize::from);
        match d {
            [0, 0, 0, 0] => Ok(None),
            [1, c, h, w] => Ok(Some([c, h, w])),
            _ => Err(Error::Format(format!("bad shape {d:?}; one sample per stream"))),
        }
    }
}

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{FabricError, Rank};
use crate::autodiff::Tensor;

/// Protocol phase a message belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Features,
    FeatureGrads,
    /// Batch-norm statistics of the given hidden layer.
    BnStats(u16),
    /// Gradient of the batch-norm statistics of the given hidden layer.
    BnGrads(u16),
    GradSync,
    Broadcast,
    Barrier,
    /// Pre-step parameter checksums sent to rank 0.
    Checksum,
    User(u16),
}

impl Phase {
    pub fn code(self) -> u32 {
        match self {
            Phase::Features => 1,
            Phase::FeatureGrads => 2,
            Phase::GradSync => 3,
            Phase::Broadcast => 4,
            Phase::Barrier => 5,
            Phase::Checksum => 6,
            Phase::BnStats(l) => 0x1_0000 | l as u32,
            Phase::BnGrads(l) => 0x2_0000 | l as u32,
            Phase::User(x) => 0x3_0000 | x as u32,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        let low = (code & 0xffff) as u16;
        Some(match code >> 16 {
            0 => match code {
                1 => Phase::Features,
                2 => Phase::FeatureGrads,
                3 => Phase::GradSync,
                4 => Phase::Broadcast,
                5 => Phase::Barrier,
                6 => Phase::Checksum,
                _ => return None,
            },
            1 => Phase::BnStats(low),
            2 => Phase::BnGrads(low),
            3 => Phase::User(low),
            _ => return None,
        })
    }
}

/// Couples a message to one `(epoch, step, phase)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Tag {
    pub epoch: u32,
    pub step: u64,
    pub phase: Phase,
}

impl Tag {
    pub fn new(epoch: u32, step: u64, phase: Phase) -> Self {
        Self { epoch, step, phase }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}/s{}/{:?}", self.epoch, self.step, self.phase)
    }
}

/// One point-to-point message.
///
/// Wire layout, all integers little-endian:
///
/// ```text
/// magic   4 bytes  "E2MG"
/// version u8       1
/// src     u32
/// dst     u32
/// epoch   u32
/// step    u64
/// phase   u32      Phase::code
/// dtype   u8       0 = f64
/// rank    u8       0..=2
/// dims    u64 × rank
/// payload f64 × Π dims, row-major
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct TensorMsg {
    pub src: Rank,
    pub dst: Rank,
    pub tag: Tag,
    pub payload: Tensor,
}

const MAGIC: &[u8; 4] = b"E2MG";
const VERSION: u8 = 1;
const DTYPE_F64: u8 = 0;

impl TensorMsg {
    pub fn encode(&self) -> Vec<u8> {
        let shape = self.payload.shape();
        let mut buf = Vec::with_capacity(32 + shape.len() * 8 + self.payload.numel() * 8);
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        buf.extend_from_slice(&(self.src as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dst as u32).to_le_bytes());
        buf.extend_from_slice(&self.tag.epoch.to_le_bytes());
        buf.extend_from_slice(&self.tag.step.to_le_bytes());
        buf.extend_from_slice(&self.tag.phase.code().to_le_bytes());
        buf.push(DTYPE_F64);
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in self.payload.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FabricError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(FabricError::Wire("bad magic".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(FabricError::Wire(format!("unsupported version {version}")));
        }
        let src = r.u32()? as Rank;
        let dst = r.u32()? as Rank;
        let epoch = r.u32()?;
        let step = r.u64()?;
        let code = r.u32()?;
        let phase = Phase::from_code(code)
            .ok_or_else(|| FabricError::Wire(format!("unknown phase code {code:#x}")))?;
        if r.u8()? != DTYPE_F64 {
            return Err(FabricError::Wire("unsupported dtype".into()));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| r.u64().map(f64::from_bits))
            .collect::<Result<Vec<_>, _>>()?;
        if r.pos != bytes.len() {
            return Err(FabricError::Wire("trailing bytes".into()));
        }
        let payload = Tensor::new(&shape, data).map_err(|e| FabricError::Wire(e.to_string()))?;
        Ok(Self {
            src,
            dst,
            tag: Tag::new(epoch, step, phase),
            payload,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FabricError> {
        let end = self.pos + n;
        let out = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| FabricError::Wire("truncated message".into()))?;
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, FabricError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, FabricError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, FabricError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn phase_strategy() -> impl Strategy<Value = Phase> {
        prop_oneof![
            Just(Phase::Features),
            Just(Phase::FeatureGrads),
            Just(Phase::GradSync),
            Just(Phase::Broadcast),
            Just(Phase::Barrier),
            Just(Phase::Checksum),
            any::<u16>().prop_map(Phase::BnStats),
            any::<u16>().prop_map(Phase::BnGrads),
            any::<u16>().prop_map(Phase::User),
        ]
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(
            src in 0usize..64, dst in 0usize..64, epoch: u32, step: u64,
            phase in phase_strategy(),
            rows in 0usize..5, cols in 0usize..5, seed: u64,
        ) {
            let data = (0..rows * cols).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
            let payload = Tensor::new(&[rows, cols], data).unwrap();
            let msg = TensorMsg { src, dst, tag: Tag::new(epoch, step, phase), payload };
            let back = TensorMsg::decode(&msg.encode()).unwrap();
            prop_assert_eq!(back.src, msg.src);
            prop_assert_eq!(back.tag, msg.tag);
            prop_assert!(back.payload.bitwise_eq(&msg.payload));
        }
    }

    #[test]
    fn rejects_truncation_and_garbage() {
        let msg = TensorMsg {
            src: 1,
            dst: 0,
            tag: Tag::new(0, 3, Phase::Features),
            payload: Tensor::vector(vec![1.0, 2.0]),
        };
        let bytes = msg.encode();
        assert!(TensorMsg::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(TensorMsg::decode(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(TensorMsg::decode(&long).is_err());
    }
}

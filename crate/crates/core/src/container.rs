//! Flat binary weight container.
//!
//! Layout: 8-byte magic `PADREW01`, little-endian `u32` record count, then per
//! record `u8 kind`, `u8 side`, `u32 dim`, `u32 count`, and `count`
//! little-endian `f64` values. Structural integers of a record (rank, kernel
//! sizes, shapes, flags) are stored as leading values; they are small enough
//! to be exact in `f64`.

use std::path::Path;

use crate::block::{CombineWeights, PadreBlock, WMode};
use crate::error::{PadreError, Result};
use crate::mixer::{Mixer, MixerKind, Padding, Side};
use crate::rational::{Denominator, RationalPadreBlock};
use crate::rect::{RectKind, RectOp};
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

pub const MAGIC: &[u8; 8] = b"PADREW01";

pub mod kind {
    pub const IDENTITY: u8 = 0;
    pub const DENSE: u8 = 1;
    pub const DIAGONAL: u8 = 2;
    pub const LOW_RANK: u8 = 3;
    pub const CONV1D: u8 = 4;
    pub const CONV2D: u8 = 5;
    pub const TENSOR: u8 = 16;
    pub const RECT_DENSE: u8 = 17;
    pub const RECT_LOW_RANK: u8 = 18;
    pub const RECT_IDENTITY: u8 = 19;
    pub const WEIGHTS: u8 = 20;
    pub const BLOCK_MANIFEST: u8 = 32;
    pub const RATIONAL_MANIFEST: u8 = 33;
}

pub const SIDE_TOKEN: u8 = 0;
pub const SIDE_CHANNEL: u8 = 1;
pub const SIDE_NONE: u8 = 255;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub kind: u8,
    pub side: u8,
    pub dim: u32,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub records: Vec<Record>,
}

fn fmt_err(msg: impl Into<String>) -> PadreError {
    PadreError::Format(msg.into())
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| fmt_err(format!("{what} {v} does not fit in u32")))
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload: usize = self.records.iter().map(|r| 10 + 8 * r.values.len()).sum();
        let mut out = Vec::with_capacity(12 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&u32_of(self.records.len(), "record count")?.to_le_bytes());
        for r in &self.records {
            out.push(r.kind);
            out.push(r.side);
            out.extend_from_slice(&r.dim.to_le_bytes());
            out.extend_from_slice(&u32_of(r.values.len(), "value count")?.to_le_bytes());
            for v in &r.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(fmt_err("bad magic"));
        }
        let count = cur.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let kind = cur.take(1)?[0];
            let side = cur.take(1)?[0];
            let dim = cur.u32()?;
            let n = cur.u32()? as usize;
            let raw = cur.take(n.checked_mul(8).ok_or_else(|| fmt_err("value count overflow"))?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            records.push(Record { kind, side, dim, values });
        }
        if cur.pos != bytes.len() {
            return Err(fmt_err(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Ok(Self { records })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| fmt_err("truncated container"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn side_code(side: Side) -> u8 {
    match side {
        Side::Token => SIDE_TOKEN,
        Side::Channel => SIDE_CHANNEL,
    }
}

fn side_from(code: u8) -> Result<Side> {
    match code {
        SIDE_TOKEN => Ok(Side::Token),
        SIDE_CHANNEL => Ok(Side::Channel),
        other => Err(fmt_err(format!("bad side tag {other}"))),
    }
}

fn padding_code(p: Padding) -> f64 {
    match p {
        Padding::Zero => 0.0,
        Padding::Circular => 1.0,
    }
}

/// Reads structural integers from the front of a record.
struct Header<'a> {
    values: &'a [f64],
    pos: usize,
}

impl<'a> Header<'a> {
    fn new(values: &'a [f64]) -> Self {
        Self { values, pos: 0 }
    }

    fn int(&mut self) -> Result<usize> {
        let v = *self.values.get(self.pos).ok_or_else(|| fmt_err("record header truncated"))?;
        self.pos += 1;
        if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
            return Err(fmt_err(format!("bad structural value {v}")));
        }
        Ok(v as usize)
    }

    fn flag(&mut self) -> Result<bool> {
        match self.int()? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(fmt_err(format!("bad flag {other}"))),
        }
    }

    fn padding(&mut self) -> Result<Padding> {
        match self.int()? {
            0 => Ok(Padding::Zero),
            1 => Ok(Padding::Circular),
            other => Err(fmt_err(format!("bad padding tag {other}"))),
        }
    }

    fn rest<T: Scalar>(&self) -> Vec<T> {
        self.values[self.pos..].iter().map(|&v| T::from_f64_lossy(v)).collect()
    }
}

fn widen<T: Scalar>(v: &[T]) -> impl Iterator<Item = f64> + '_ {
    v.iter().map(|x| x.to_f64_lossy())
}

pub fn mixer_record<T: Scalar>(m: &Mixer<T>) -> Result<Record> {
    let (kind, mut values) = match m.kind() {
        MixerKind::Identity => (kind::IDENTITY, vec![]),
        MixerKind::Dense => (kind::DENSE, vec![]),
        MixerKind::Diagonal => (kind::DIAGONAL, vec![]),
        MixerKind::LowRank { rank } => (kind::LOW_RANK, vec![rank as f64]),
        MixerKind::Conv1d { len, banks, padding } => (kind::CONV1D, vec![len as f64, banks as f64, padding_code(padding)]),
        MixerKind::Conv2d {
            kh,
            kw,
            height,
            width,
            banks,
            padding,
        } => (
            kind::CONV2D,
            vec![kh as f64, kw as f64, height as f64, width as f64, banks as f64, padding_code(padding)],
        ),
    };
    values.extend(widen(m.params()));
    Ok(Record {
        kind,
        side: side_code(m.side()),
        dim: u32_of(m.dim(), "mixer dim")?,
        values,
    })
}

pub fn mixer_from_record<T: Scalar>(r: &Record) -> Result<Mixer<T>> {
    let side = side_from(r.side)?;
    let dim = r.dim as usize;
    let mut h = Header::new(&r.values);
    let kind = match r.kind {
        kind::IDENTITY => MixerKind::Identity,
        kind::DENSE => MixerKind::Dense,
        kind::DIAGONAL => MixerKind::Diagonal,
        kind::LOW_RANK => MixerKind::LowRank { rank: h.int()? },
        kind::CONV1D => MixerKind::Conv1d {
            len: h.int()?,
            banks: h.int()?,
            padding: h.padding()?,
        },
        kind::CONV2D => MixerKind::Conv2d {
            kh: h.int()?,
            kw: h.int()?,
            height: h.int()?,
            width: h.int()?,
            banks: h.int()?,
            padding: h.padding()?,
        },
        other => return Err(fmt_err(format!("record kind {other} is not a mixer"))),
    };
    Mixer::new(side, dim, kind, h.rest()).map_err(|e| fmt_err(format!("invalid mixer record: {e}")))
}

pub fn tensor_record<T: Scalar>(t: &Tensor2<T>) -> Result<Record> {
    let mut values = vec![t.rows() as f64, t.cols() as f64];
    values.extend(widen(t.data()));
    Ok(Record {
        kind: kind::TENSOR,
        side: SIDE_NONE,
        dim: u32_of(t.rows(), "tensor rows")?,
        values,
    })
}

pub fn tensor_from_record<T: Scalar>(r: &Record) -> Result<Tensor2<T>> {
    if r.kind != kind::TENSOR {
        return Err(fmt_err(format!("expected tensor record, got kind {}", r.kind)));
    }
    let mut h = Header::new(&r.values);
    let (rows, cols) = (h.int()?, h.int()?);
    Tensor2::from_vec(rows, cols, h.rest()).map_err(|e| fmt_err(format!("invalid tensor record: {e}")))
}

pub fn rect_record<T: Scalar>(op: &RectOp<T>) -> Result<Record> {
    let (kind, mut values) = match op.kind() {
        RectKind::Identity => (kind::RECT_IDENTITY, vec![op.rows() as f64, op.cols() as f64]),
        RectKind::Dense => (kind::RECT_DENSE, vec![op.rows() as f64, op.cols() as f64]),
        RectKind::LowRank { rank } => (kind::RECT_LOW_RANK, vec![op.rows() as f64, op.cols() as f64, rank as f64]),
    };
    values.extend(widen(op.params()));
    Ok(Record {
        kind,
        side: SIDE_NONE,
        dim: u32_of(op.rows(), "operator rows")?,
        values,
    })
}

pub fn rect_from_record<T: Scalar>(r: &Record) -> Result<RectOp<T>> {
    let mut h = Header::new(&r.values);
    let (rows, cols) = (h.int()?, h.int()?);
    let kind = match r.kind {
        kind::RECT_IDENTITY => RectKind::Identity,
        kind::RECT_DENSE => RectKind::Dense,
        kind::RECT_LOW_RANK => RectKind::LowRank { rank: h.int()? },
        other => return Err(fmt_err(format!("record kind {other} is not a rectangular operator"))),
    };
    RectOp::new(rows, cols, kind, h.rest()).map_err(|e| fmt_err(format!("invalid operator record: {e}")))
}

/// Manifest, `A_1..A_d`, `B_1..B_d`, `C_2..C_d`, `D_2..D_d`, weights, then
/// the optional bias, `U` and `V`.
pub fn block_records<T: Scalar>(b: &PadreBlock<T>) -> Result<Vec<Record>> {
    let mask: Vec<f64> = b.degree_mask().iter().map(|&i| i as f64).collect();
    let mut manifest = vec![
        b.degree() as f64,
        b.n() as f64,
        b.d() as f64,
        b.weights().mode().code() as f64,
        b.normalizes_y() as u8 as f64,
        b.bias().is_some() as u8 as f64,
        b.u().is_some() as u8 as f64,
        b.v().is_some() as u8 as f64,
        mask.len() as f64,
    ];
    manifest.extend(mask);
    let mut out = vec![Record {
        kind: kind::BLOCK_MANIFEST,
        side: SIDE_NONE,
        dim: u32_of(b.degree(), "degree")?,
        values: manifest,
    }];
    for m in b.a().iter().chain(b.b()).chain(b.c()).chain(b.dm()) {
        out.push(mixer_record(m)?);
    }
    out.push(Record {
        kind: kind::WEIGHTS,
        side: SIDE_NONE,
        dim: u32_of(b.degree(), "degree")?,
        values: widen(b.weights().values()).collect(),
    });
    if let Some(l) = b.bias() {
        out.push(tensor_record(l)?);
    }
    for op in [b.u(), b.v()].into_iter().flatten() {
        out.push(rect_record(op)?);
    }
    Ok(out)
}

fn next<'a>(it: &mut impl Iterator<Item = &'a Record>, what: &str) -> Result<&'a Record> {
    it.next().ok_or_else(|| fmt_err(format!("missing {what} record")))
}

pub fn block_from_records<'a, T: Scalar>(it: &mut impl Iterator<Item = &'a Record>) -> Result<PadreBlock<T>> {
    let manifest = next(it, "block manifest")?;
    if manifest.kind != kind::BLOCK_MANIFEST {
        return Err(fmt_err(format!("expected block manifest, got kind {}", manifest.kind)));
    }
    let mut h = Header::new(&manifest.values);
    let degree = h.int()?;
    let (n, d) = (h.int()?, h.int()?);
    let mode_code = h.int()?;
    let mode = u8::try_from(mode_code)
        .ok()
        .and_then(WMode::from_code)
        .ok_or_else(|| fmt_err(format!("bad weight mode {mode_code}")))?;
    let (normalize, has_bias, has_u, has_v) = (h.flag()?, h.flag()?, h.flag()?, h.flag()?);
    let mask_len = h.int()?;
    let mask = (0..mask_len).map(|_| h.int()).collect::<Result<Vec<_>>>()?;
    if degree == 0 || degree > 64 {
        return Err(fmt_err(format!("bad degree {degree}")));
    }
    let mut builder = PadreBlock::builder(n, d, degree);
    for i in 1..=degree {
        builder = builder.a(i, mixer_from_record(next(it, "A")?)?);
    }
    for i in 1..=degree {
        builder = builder.b(i, mixer_from_record(next(it, "B")?)?);
    }
    for i in 1..degree {
        builder = builder.c(i, mixer_from_record(next(it, "C")?)?);
    }
    for i in 1..degree {
        builder = builder.d(i, mixer_from_record(next(it, "D")?)?);
    }
    let w = next(it, "weights")?;
    if w.kind != kind::WEIGHTS {
        return Err(fmt_err(format!("expected weights record, got kind {}", w.kind)));
    }
    let values = w.values.iter().map(|&v| T::from_f64_lossy(v)).collect();
    builder = builder.weights(CombineWeights::new(mode, n, d, degree, values).map_err(|e| fmt_err(e.to_string()))?);
    if has_bias {
        builder = builder.bias(Some(tensor_from_record(next(it, "bias")?)?));
    }
    let u = if has_u { Some(rect_from_record(next(it, "U")?)?) } else { None };
    let v = if has_v { Some(rect_from_record(next(it, "V")?)?) } else { None };
    builder
        .resize(u, v)
        .normalize_y(normalize)
        .degree_mask(mask)
        .build()
        .map_err(|e| fmt_err(format!("invalid block: {e}")))
}

/// Rational manifest `[epsilon, square, cascade]`, the numerator block, then
/// either the constant denominator tensor or the denominator block.
pub fn rational_records<T: Scalar>(b: &RationalPadreBlock<T>) -> Result<Vec<Record>> {
    let cascade = matches!(b.denominator(), Denominator::Cascade(_));
    let mut out = vec![Record {
        kind: kind::RATIONAL_MANIFEST,
        side: SIDE_NONE,
        dim: u32_of(b.num_degree(), "degree")?,
        values: vec![b.epsilon().to_f64_lossy(), b.squares_denominator() as u8 as f64, cascade as u8 as f64],
    }];
    out.extend(block_records(b.numerator())?);
    match b.denominator() {
        Denominator::Constant(p) => out.push(tensor_record(p)?),
        Denominator::Cascade(den) => out.extend(block_records(den)?),
    }
    Ok(out)
}

pub fn rational_from_records<'a, T: Scalar>(it: &mut impl Iterator<Item = &'a Record>) -> Result<RationalPadreBlock<T>> {
    let manifest = next(it, "rational manifest")?;
    if manifest.kind != kind::RATIONAL_MANIFEST || manifest.values.len() != 3 {
        return Err(fmt_err("expected rational manifest"));
    }
    let epsilon = T::from_f64_lossy(manifest.values[0]);
    let mut h = Header::new(&manifest.values[1..]);
    let (square, cascade) = (h.flag()?, h.flag()?);
    let num = block_from_records(it)?;
    let den = if cascade {
        Denominator::Cascade(block_from_records(it)?)
    } else {
        Denominator::Constant(tensor_from_record(next(it, "denominator")?)?)
    };
    RationalPadreBlock::new(num, den, epsilon, square).map_err(|e| fmt_err(format!("invalid rational block: {e}")))
}

impl Container {
    pub fn from_block<T: Scalar>(b: &PadreBlock<T>) -> Result<Self> {
        Ok(Self { records: block_records(b)? })
    }

    pub fn from_rational<T: Scalar>(b: &RationalPadreBlock<T>) -> Result<Self> {
        Ok(Self {
            records: rational_records(b)?,
        })
    }

    pub fn to_block<T: Scalar>(&self) -> Result<PadreBlock<T>> {
        let mut it = self.records.iter();
        let b = block_from_records(&mut it)?;
        self.ensure_consumed(it)?;
        Ok(b)
    }

    pub fn to_rational<T: Scalar>(&self) -> Result<RationalPadreBlock<T>> {
        let mut it = self.records.iter();
        let b = rational_from_records(&mut it)?;
        self.ensure_consumed(it)?;
        Ok(b)
    }

    fn ensure_consumed<'a>(&self, it: impl Iterator<Item = &'a Record>) -> Result<()> {
        match it.count() {
            0 => Ok(()),
            extra => Err(fmt_err(format!("{extra} unused records"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::{build_reference_instance, Layout};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bits<T: Scalar>(b: &PadreBlock<T>) -> Vec<u64> {
        b.param_groups().iter().flat_map(|(_, v)| v.iter().map(|x| x.to_f64_lossy().to_bits())).collect()
    }

    #[test]
    fn header_layout() {
        let c = Container {
            records: vec![Record {
                kind: kind::DIAGONAL,
                side: SIDE_CHANNEL,
                dim: 2,
                values: vec![2.0, 3.0],
            }],
        };
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"PADREW01");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(bytes[12], kind::DIAGONAL);
        assert_eq!(bytes[13], SIDE_CHANNEL);
        assert_eq!(&bytes[14..18], &2u32.to_le_bytes());
        assert_eq!(&bytes[18..22], &2u32.to_le_bytes());
        assert_eq!(&bytes[22..30], &2.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 38);
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn rejects_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b: PadreBlock<f64> = build_reference_instance(9, 3, 3, Layout::Grid { height: 3, width: 3 }, &mut rng).unwrap();
        let bytes = Container::from_block(&b).unwrap().to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad), Err(PadreError::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(Container::from_bytes(&extra).is_err());
    }

    #[test]
    fn block_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b: PadreBlock<f64> = build_reference_instance(16, 4, 3, Layout::Grid { height: 4, width: 4 }, &mut rng)
            .unwrap()
            .with_bias(Some(Tensor2::random_uniform(16, 4, 1.0, &mut rng)))
            .unwrap()
            .with_normalize_y(true);
        let back: PadreBlock<f64> = Container::from_bytes(&Container::from_block(&b).unwrap().to_bytes().unwrap())
            .unwrap()
            .to_block()
            .unwrap();
        assert_eq!(bits(&b), bits(&back));
        assert_eq!(b, back);
    }

    #[test]
    fn f32_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b: PadreBlock<f32> = build_reference_instance(12, 3, 2, Layout::Seq1d, &mut rng).unwrap();
        let back: PadreBlock<f32> = Container::from_block(&b).unwrap().to_block().unwrap();
        assert_eq!(b, back);
    }

    #[test]
    fn rational_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let num: PadreBlock<f64> = build_reference_instance(8, 2, 2, Layout::Seq1d, &mut rng).unwrap();
        let den: PadreBlock<f64> = build_reference_instance(8, 2, 3, Layout::Seq1d, &mut rng).unwrap();
        let r = RationalPadreBlock::new(num, Denominator::Cascade(den), 1e-6, true).unwrap();
        let back: RationalPadreBlock<f64> = Container::from_rational(&r).unwrap().to_rational().unwrap();
        assert_eq!(r, back);
    }
}

//! Minimal protobuf wire-format reader and writer.
//!
//! Only the primitives needed to walk ONNX messages: varints, fixed32/64 and
//! length-delimited fields. Length-delimited payloads are returned as borrowed
//! slices so callers can skip tensor data without copying it.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("unexpected end of input at offset {0}")]
    Truncated(usize),
    #[error("varint longer than 10 bytes at offset {0}")]
    VarintOverflow(usize),
    #[error("unsupported wire type {wire_type} at offset {offset}")]
    BadWireType { wire_type: u8, offset: usize },
    #[error("field number 0 at offset {0}")]
    ZeroField(usize),
    #[error("invalid utf-8 in string field {0}")]
    Utf8(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WireType {
    Varint,
    Fixed64,
    Len,
    Fixed32,
}

impl WireType {
    fn from_bits(bits: u8, offset: usize) -> Result<Self, WireError> {
        match bits {
            0 => Ok(WireType::Varint),
            1 => Ok(WireType::Fixed64),
            2 => Ok(WireType::Len),
            5 => Ok(WireType::Fixed32),
            // 3/4 are deprecated groups; ONNX never emits them.
            other => Err(WireError::BadWireType {
                wire_type: other,
                offset,
            }),
        }
    }

    fn bits(self) -> u8 {
        match self {
            WireType::Varint => 0,
            WireType::Fixed64 => 1,
            WireType::Len => 2,
            WireType::Fixed32 => 5,
        }
    }
}

/// One decoded field. `Len` borrows from the input buffer.
#[derive(Debug, Clone, Copy)]
pub enum FieldValue<'a> {
    Varint(u64),
    Fixed64(u64),
    Fixed32(u32),
    Len(&'a [u8]),
}

impl<'a> FieldValue<'a> {
    pub fn as_u64(&self) -> Option<u64> {
        match *self {
            FieldValue::Varint(v) | FieldValue::Fixed64(v) => Some(v),
            FieldValue::Fixed32(v) => Some(v as u64),
            FieldValue::Len(_) => None,
        }
    }

    pub fn as_bytes(&self) -> Option<&'a [u8]> {
        match *self {
            FieldValue::Len(b) => Some(b),
            _ => None,
        }
    }
}

/// Sequential field reader over a single message body.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    /// Offset of `buf[0]` in the outermost buffer, for error messages.
    base: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0, base: 0 }
    }

    /// Reader for a nested message whose bytes start at absolute `base`.
    pub fn nested(&self, body: &'a [u8]) -> Reader<'a> {
        let offset = body.as_ptr() as usize - self.buf.as_ptr() as usize;
        Reader {
            buf: body,
            pos: 0,
            base: self.base + offset,
        }
    }

    fn abs(&self) -> usize {
        self.base + self.pos
    }

    pub fn read_varint(&mut self) -> Result<u64, WireError> {
        let start = self.abs();
        let mut value = 0u64;
        for i in 0..10 {
            let byte = *self.buf.get(self.pos).ok_or(WireError::Truncated(self.abs()))?;
            self.pos += 1;
            value |= u64::from(byte & 0x7f) << (7 * i);
            if byte & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(WireError::VarintOverflow(start))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(WireError::Truncated(self.base + self.buf.len()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    /// Next `(field number, value)` pair, or `None` at end of message.
    pub fn next_field(&mut self) -> Result<Option<(u32, FieldValue<'a>)>, WireError> {
        if self.pos >= self.buf.len() {
            return Ok(None);
        }
        let key_at = self.abs();
        let key = self.read_varint()?;
        let field = (key >> 3) as u32;
        if field == 0 {
            return Err(WireError::ZeroField(key_at));
        }
        let value = match WireType::from_bits((key & 7) as u8, key_at)? {
            WireType::Varint => FieldValue::Varint(self.read_varint()?),
            WireType::Fixed64 => {
                let b = self.take(8)?;
                FieldValue::Fixed64(u64::from_le_bytes(b.try_into().unwrap()))
            }
            WireType::Fixed32 => {
                let b = self.take(4)?;
                FieldValue::Fixed32(u32::from_le_bytes(b.try_into().unwrap()))
            }
            WireType::Len => {
                let len = self.read_varint()?;
                let len = usize::try_from(len).map_err(|_| WireError::Truncated(self.abs()))?;
                FieldValue::Len(self.take(len)?)
            }
        };
        Ok(Some((field, value)))
    }
}

pub fn utf8(field: u32, bytes: &[u8]) -> Result<String, WireError> {
    std::str::from_utf8(bytes)
        .map(str::to_owned)
        .map_err(|_| WireError::Utf8(field))
}

/// Appends the values of a repeated varint field, accepting both packed and
/// unpacked encodings.
pub fn push_varints(value: FieldValue<'_>, out: &mut Vec<i64>) -> Result<(), WireError> {
    match value {
        FieldValue::Len(body) => {
            let mut r = Reader::new(body);
            while r.pos < body.len() {
                out.push(r.read_varint()? as i64);
            }
        }
        other => out.push(other.as_u64().unwrap_or_default() as i64),
    }
    Ok(())
}

/// Appends the values of a repeated float field (packed or not).
pub fn push_floats(value: FieldValue<'_>, out: &mut Vec<f32>) -> Result<(), WireError> {
    match value {
        FieldValue::Len(body) => {
            if body.len() % 4 != 0 {
                return Err(WireError::Truncated(body.len()));
            }
            out.extend(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
            );
        }
        FieldValue::Fixed32(bits) => out.push(f32::from_bits(bits)),
        _ => {}
    }
    Ok(())
}

/// Number of elements in a repeated numeric field without materializing them.
pub fn count_repeated(value: FieldValue<'_>, fixed_width: Option<usize>) -> Result<u64, WireError> {
    match (value, fixed_width) {
        (FieldValue::Len(body), Some(w)) => Ok((body.len() / w) as u64),
        (FieldValue::Len(body), None) => Ok(body.iter().filter(|&&b| b & 0x80 == 0).count() as u64),
        _ => Ok(1),
    }
}

/// Protobuf message builder.
#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    fn raw_varint(&mut self, mut v: u64) {
        while v >= 0x80 {
            self.buf.push((v as u8) | 0x80);
            v >>= 7;
        }
        self.buf.push(v as u8);
    }

    fn key(&mut self, field: u32, wt: WireType) {
        self.raw_varint((u64::from(field) << 3) | u64::from(wt.bits()));
    }

    pub fn varint(&mut self, field: u32, v: u64) -> &mut Self {
        self.key(field, WireType::Varint);
        self.raw_varint(v);
        self
    }

    pub fn int(&mut self, field: u32, v: i64) -> &mut Self {
        self.varint(field, v as u64)
    }

    pub fn float(&mut self, field: u32, v: f32) -> &mut Self {
        self.key(field, WireType::Fixed32);
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bytes(&mut self, field: u32, b: &[u8]) -> &mut Self {
        self.key(field, WireType::Len);
        self.raw_varint(b.len() as u64);
        self.buf.extend_from_slice(b);
        self
    }

    pub fn string(&mut self, field: u32, s: &str) -> &mut Self {
        self.bytes(field, s.as_bytes())
    }

    pub fn message(&mut self, field: u32, m: Writer) -> &mut Self {
        self.bytes(field, &m.buf)
    }

    pub fn packed_ints(&mut self, field: u32, vals: &[i64]) -> &mut Self {
        let mut body = Writer::new();
        for &v in vals {
            body.raw_varint(v as u64);
        }
        self.bytes(field, &body.buf)
    }

    pub fn packed_floats(&mut self, field: u32, vals: &[f32]) -> &mut Self {
        let body: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.bytes(field, &body)
    }
}

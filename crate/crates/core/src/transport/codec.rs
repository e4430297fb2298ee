//! Entry batch encoding for shuffle payloads.
//!
//! Layout per entry: little-endian `u32` key length, key bytes, then the
//! value in fixed-width little-endian form. Entries are concatenated with no
//! header, so an empty batch is zero bytes.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("truncated entry at byte {offset}: need {needed} more bytes, {available} left")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
}

/// A value with a fixed-width little-endian wire form.
pub trait FixedWidth: Sized {
    const WIDTH: usize;

    fn write_le(&self, out: &mut Vec<u8>);

    /// Decodes from exactly `WIDTH` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! fixed_width_int {
    ($($t:ty),*) => {$(
        impl FixedWidth for $t {
            const WIDTH: usize = std::mem::size_of::<$t>();

            #[inline]
            fn write_le(&self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            #[inline]
            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("width checked by caller"))
            }
        }
    )*};
}

fixed_width_int!(i64, u64);

/// Appends one entry to `out`.
///
/// # Panics
///
/// If the key is 4 GiB or longer.
#[inline]
pub fn encode_entry<V: FixedWidth>(out: &mut Vec<u8>, key: &[u8], value: &V) {
    let len = u32::try_from(key.len()).expect("key length must fit in u32");
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(key);
    value.write_le(out);
}

pub fn encode_entries<'a, V, I, K>(entries: I) -> Vec<u8>
where
    V: FixedWidth + 'a,
    K: AsRef<[u8]>,
    I: IntoIterator<Item = (K, &'a V)>,
{
    let mut out = Vec::new();
    for (k, v) in entries {
        encode_entry(&mut out, k.as_ref(), v);
    }
    out
}

/// Decodes a whole batch. Trailing bytes that do not form a complete entry
/// are an error.
pub fn decode_entries<V: FixedWidth>(bytes: &[u8]) -> Result<Vec<(Vec<u8>, V)>, CodecError> {
    let mut out = Vec::new();
    for entry in EntryIter::<V>::new(bytes) {
        let (k, v) = entry?;
        out.push((k.to_vec(), v));
    }
    Ok(out)
}

/// Borrowing iterator over an encoded batch.
pub struct EntryIter<'a, V> {
    bytes: &'a [u8],
    offset: usize,
    failed: bool,
    _value: std::marker::PhantomData<V>,
}

impl<'a, V: FixedWidth> EntryIter<'a, V> {
    pub fn new(bytes: &'a [u8]) -> Self {
        EntryIter {
            bytes,
            offset: 0,
            failed: false,
            _value: std::marker::PhantomData,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let rest = &self.bytes[self.offset..];
        if rest.len() < n {
            self.failed = true;
            return Err(CodecError::Truncated {
                offset: self.offset,
                needed: n,
                available: rest.len(),
            });
        }
        self.offset += n;
        Ok(&rest[..n])
    }
}

impl<'a, V: FixedWidth> Iterator for EntryIter<'a, V> {
    type Item = Result<(&'a [u8], V), CodecError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.offset == self.bytes.len() {
            return None;
        }
        let entry = (|| {
            let len = u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize;
            let key = self.take(len)?;
            let value = V::read_le(self.take(V::WIDTH)?);
            Ok((key, value))
        })();
        Some(entry)
    }
}

//! Canonical byte encoding for transactions and blocks.
//!
//! Integers are big-endian and fixed width. Variable-length fields carry a
//! length prefix. Fields appear in declaration order.
//!
//! ```text
//! transaction   = sender:u16 nonce:u64 gas_used:u64 tag:u8 body
//! body(tag=1)   = entry_count:u32 { name_len:u16 name:utf8 digest:[32] }*
//!                 mode:u8(0=allow,1=deny) network_size:u16 id_count:u32 { id:u16 }*
//!                 ids strictly ascending
//! body(tag=2)   = unit_id:u16 name_len:u16 name:utf8 window_index:u64
//!                 kind:u8(0=under,1=over) rms_bits:u64 detected_at_us:u64
//! preimage      = index:u64 prev_hash:[32] timestamp_ms:u64 tx_count:u32
//!                 { tx_len:u32 transaction }* nonce:u64
//! block         = preimage block_hash:[32]
//! block_hash    = SHA-256(preimage)
//! ```

use super::LedgerError;

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self { buf: Vec::new() }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn raw(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    /// u16 length prefix followed by UTF-8 bytes.
    pub fn name(&mut self, s: &str) -> &mut Self {
        let len = u16::try_from(s.len()).expect("name length checked at submission");
        self.u16(len).raw(s.as_bytes())
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], LedgerError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| LedgerError::Decode(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, LedgerError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, LedgerError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, LedgerError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, LedgerError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn array32(&mut self) -> Result<[u8; 32], LedgerError> {
        Ok(self.take(32)?.try_into().unwrap())
    }

    pub fn name(&mut self) -> Result<String, LedgerError> {
        let len = usize::from(self.u16()?);
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| LedgerError::Decode("name is not valid UTF-8".into()))
    }

    pub fn finish(&self) -> Result<(), LedgerError> {
        if self.pos != self.buf.len() {
            return Err(LedgerError::Decode(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

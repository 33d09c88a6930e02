use crc::{Crc, CRC_32_ISCSI};

const CASTAGNOLI: Crc<u32> = Crc::<u32>::new(&CRC_32_ISCSI);

/// CRC-32C (Castagnoli).
pub fn crc32c(bytes: &[u8]) -> u32 {
    CASTAGNOLI.checksum(bytes)
}

/// Short hex fingerprint of a byte string.
pub fn fingerprint(bytes: &[u8]) -> String {
    format!("crc32c:{:08x}", crc32c(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc32c_check_value() {
        // standard check input for CRC-32C
        assert_eq!(crc32c(b"123456789"), 0xe306_9283);
    }
}

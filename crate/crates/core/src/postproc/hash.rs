//! 64-bit CRC used to confirm that reconciled keys agree.

use crate::protocol::message::pack_bits;

/// ECMA-182 generator polynomial.
const POLY: u64 = 0x42F0_E1EB_A9EA_3693;

const fn build_table() -> [u64; 256] {
    let mut table = [0u64; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = (i as u64) << 56;
        let mut k = 0;
        while k < 8 {
            crc = if crc & (1 << 63) != 0 {
                (crc << 1) ^ POLY
            } else {
                crc << 1
            };
            k += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

static TABLE: [u64; 256] = build_table();

fn crc64(mut crc: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        crc = TABLE[((crc >> 56) as u8 ^ b) as usize] ^ (crc << 8);
    }
    crc
}

/// CRC of the packed key, starting from `seed` and closed with the bit
/// length so that trailing zero bits still matter.
pub fn key_hash(bits: &[u8], seed: u64) -> u64 {
    let crc = crc64(seed, &pack_bits(bits));
    crc64(crc, &(bits.len() as u64).to_be_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn check_value() {
        // CRC-64/ECMA-182 of "123456789" with zero init, no reflection.
        assert_eq!(crc64(0, b"123456789"), 0x6C40_DF5F_0B49_7347);
    }

    #[test]
    fn sensitive_to_every_bit_and_length() {
        let key: Vec<u8> = (0..200).map(|i| (i * 7 % 3 == 0) as u8).collect();
        let h = key_hash(&key, 17);
        for i in 0..key.len() {
            let mut k = key.clone();
            k[i] ^= 1;
            assert_ne!(key_hash(&k, 17), h);
        }
        let mut longer = key.clone();
        longer.push(0);
        assert_ne!(key_hash(&longer, 17), h);
        assert_ne!(key_hash(&key, 18), h);
    }
}

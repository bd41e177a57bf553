use std::fmt;
use std::str::FromStr;

/// Bit-width of a quantized tensor. Only the widths the kernels support.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Precision {
    Bits2,
    Bits4,
    Bits8,
}

impl Precision {
    /// Ordered from widest to narrowest, the order used for kernel tables.
    pub const ALL: [Precision; 3] = [Precision::Bits8, Precision::Bits4, Precision::Bits2];

    pub const fn bits(self) -> u32 {
        match self {
            Precision::Bits2 => 2,
            Precision::Bits4 => 4,
            Precision::Bits8 => 8,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            2 => Some(Precision::Bits2),
            4 => Some(Precision::Bits4),
            8 => Some(Precision::Bits8),
            _ => None,
        }
    }

    /// Number of fields held by one 32-bit word.
    pub const fn per_word(self) -> usize {
        32 / self.bits() as usize
    }

    /// Number of fields held by one byte.
    pub const fn per_byte(self) -> usize {
        8 / self.bits() as usize
    }

    /// 32-bit loads needed per operand when operands are fetched packed.
    pub fn loads_per_operand(self) -> f64 {
        self.bits() as f64 / 32.0
    }

    pub const fn mask(self) -> u32 {
        (1u32 << self.bits()) - 1
    }

    /// Inclusive code range for this width under the given signedness.
    pub const fn code_range(self, signed: bool) -> (i32, i32) {
        let n = self.bits();
        if signed {
            (-(1 << (n - 1)), (1 << (n - 1)) - 1)
        } else {
            (0, (1 << n) - 1)
        }
    }

    /// Largest magnitude a code can take.
    pub const fn max_abs(self, signed: bool) -> u32 {
        let n = self.bits();
        if signed {
            1 << (n - 1)
        } else {
            (1 << n) - 1
        }
    }

    /// Every (input, weights, output) precision triple, 27 in total.
    pub fn triples() -> impl Iterator<Item = (Precision, Precision, Precision)> {
        Self::ALL.into_iter().flat_map(|i| {
            Self::ALL
                .into_iter()
                .flat_map(move |w| Self::ALL.into_iter().map(move |o| (i, w, o)))
        })
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bits: u32 = s
            .trim()
            .parse()
            .map_err(|_| format!("invalid precision `{s}`"))?;
        Precision::from_bits(bits).ok_or_else(|| format!("unsupported precision {bits}, expected 2, 4 or 8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triples_cover_all_permutations_once() {
        let all: Vec<_> = Precision::triples().collect();
        assert_eq!(all.len(), 27);
        let unique: std::collections::HashSet<_> = all.iter().collect();
        assert_eq!(unique.len(), 27);
    }

    #[test]
    fn code_ranges() {
        assert_eq!(Precision::Bits4.code_range(true), (-8, 7));
        assert_eq!(Precision::Bits2.code_range(false), (0, 3));
        assert_eq!(Precision::Bits8.max_abs(true), 128);
        assert_eq!(Precision::Bits8.max_abs(false), 255);
    }

    #[test]
    fn parse() {
        assert_eq!("4".parse::<Precision>().unwrap(), Precision::Bits4);
        assert!("3".parse::<Precision>().is_err());
        assert!("x".parse::<Precision>().is_err());
    }
}

//! Narrow-sense binary BCH codes over GF(2^m).
//!
//! Codewords are systematic: the first `k` bits are the message, the last
//! `n - k` bits are parity. Bit `i` of a block is the coefficient of
//! `x^(n-1-i)`, so the message occupies the high-degree terms.
//!
//! Decoding computes the `2t` syndromes, finds the error locator with
//! Berlekamp-Massey and its roots with a Chien search.

use super::PayloadError;

// Primitive polynomials indexed by field order m (bit i = coefficient of x^i).
const PRIMITIVE_POLYS: [u32; 17] = [
    0, 0, 0x7, 0xB, 0x13, 0x25, 0x43, 0x89, 0x11D, 0x211, 0x409, 0x805, 0x1053, 0x201B, 0x4443,
    0x8003, 0x1100B,
];

#[derive(Debug, Clone)]
pub struct Bch {
    n: usize,
    k: usize,
    t: usize,
    exp: Vec<u16>,
    log: Vec<u16>,
    /// Generator coefficients, index = degree.
    generator: Vec<bool>,
}

/// Result of decoding one block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub message: Vec<bool>,
    pub corrected: usize,
}

impl Bch {
    /// Builds the code for `(n, k)`; `t` is the designed correction capability
    /// whose generator has degree exactly `n - k`.
    pub fn new(n: usize, k: usize) -> Result<Self, PayloadError> {
        let invalid = |why: &str| PayloadError::InvalidCode {
            n,
            k,
            reason: why.to_string(),
        };
        let m = (n + 1).trailing_zeros() as usize;
        if n < 3 || (n + 1) != (1 << m) || m >= PRIMITIVE_POLYS.len() {
            return Err(invalid("n must be 2^m - 1 with 2 <= m <= 16"));
        }
        if k == 0 || k >= n {
            return Err(invalid("k must satisfy 0 < k < n"));
        }
        let (exp, log) = field_tables(m);

        let mut generator = vec![true];
        let mut covered = vec![false; n];
        let mut found: Option<(usize, Vec<bool>)> = None;
        for t in 1..=n / 2 {
            for i in [2 * t - 1, 2 * t] {
                let i = i % n;
                if covered[i] {
                    continue;
                }
                let coset = cyclotomic_coset(i, n);
                for &j in &coset {
                    covered[j] = true;
                }
                generator = poly_mul_gf2(&generator, &minimal_polynomial(&coset, &exp, &log, n));
            }
            // The designed distance is the largest t sharing this generator.
            let degree = generator.len() - 1;
            if degree == n - k {
                found = Some((t, generator.clone()));
            } else if degree > n - k {
                break;
            }
        }
        let (t, generator) = found.ok_or_else(|| invalid("no narrow-sense BCH code has this dimension"))?;
        Ok(Self {
            n,
            k,
            t,
            exp,
            log,
            generator,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Designed number of correctable bit errors per block.
    pub fn t(&self) -> usize {
        self.t
    }

    /// Generator polynomial coefficients, lowest degree first.
    pub fn generator(&self) -> &[bool] {
        &self.generator
    }

    /// Systematic encoding of one `k`-bit message into an `n`-bit codeword.
    pub fn encode(&self, message: &[bool]) -> Result<Vec<bool>, PayloadError> {
        if message.len() != self.k {
            return Err(PayloadError::BlockLength {
                expected: self.k,
                got: message.len(),
            });
        }
        let parity_len = self.n - self.k;
        // Long division of m(x) * x^(n-k) by g(x), high degree first.
        let mut rem = vec![false; parity_len];
        for &bit in message {
            let feedback = bit ^ rem[0];
            rem.rotate_left(1);
            rem[parity_len - 1] = false;
            if feedback {
                for (j, r) in rem.iter_mut().enumerate() {
                    // rem[j] holds the coefficient of x^(parity_len - 1 - j).
                    *r ^= self.generator[parity_len - 1 - j];
                }
            }
        }
        let mut codeword = message.to_vec();
        codeword.extend(rem);
        Ok(codeword)
    }

    /// Corrects up to `t` errors and returns the message bits.
    pub fn decode(&self, block: &[bool]) -> Result<Decoded, PayloadError> {
        if block.len() != self.n {
            return Err(PayloadError::BlockLength {
                expected: self.n,
                got: block.len(),
            });
        }
        let syndromes = self.syndromes(block);
        if syndromes.iter().all(|&s| s == 0) {
            return Ok(Decoded {
                message: block[..self.k].to_vec(),
                corrected: 0,
            });
        }
        let locator = self.berlekamp_massey(&syndromes);
        let degree = locator.len() - 1;
        if degree > self.t {
            return Err(PayloadError::UncorrectableBlock);
        }
        let mut fixed = block.to_vec();
        let mut roots = 0;
        for (i, bit) in fixed.iter_mut().enumerate() {
            let power = self.n - 1 - i;
            // Error at x^power iff locator(alpha^-power) == 0.
            let x = self.exp[(self.n - power) % self.n];
            if self.poly_eval(&locator, x) == 0 {
                *bit = !*bit;
                roots += 1;
            }
        }
        if roots != degree || self.syndromes(&fixed).iter().any(|&s| s != 0) {
            return Err(PayloadError::UncorrectableBlock);
        }
        fixed.truncate(self.k);
        Ok(Decoded {
            message: fixed,
            corrected: roots,
        })
    }

    fn mul(&self, a: u16, b: u16) -> u16 {
        if a == 0 || b == 0 {
            0
        } else {
            self.exp[self.log[a as usize] as usize + self.log[b as usize] as usize]
        }
    }

    fn div(&self, a: u16, b: u16) -> u16 {
        debug_assert!(b != 0);
        if a == 0 {
            0
        } else {
            let e = self.log[a as usize] as usize + self.n - self.log[b as usize] as usize;
            self.exp[e % self.n]
        }
    }

    fn poly_eval(&self, poly: &[u16], x: u16) -> u16 {
        poly.iter().rev().fold(0, |acc, &c| self.mul(acc, x) ^ c)
    }

    fn syndromes(&self, block: &[bool]) -> Vec<u16> {
        (1..=2 * self.t)
            .map(|j| {
                block.iter().enumerate().filter(|(_, &b)| b).fold(0u16, |acc, (i, _)| {
                    let power = (self.n - 1 - i) * j % self.n;
                    acc ^ self.exp[power]
                })
            })
            .collect()
    }

    /// Error locator polynomial, lowest degree first, trailing zeros trimmed.
    fn berlekamp_massey(&self, s: &[u16]) -> Vec<u16> {
        let mut c = vec![1u16];
        let mut b = vec![1u16];
        let mut len = 0usize;
        let mut shift = 1usize;
        let mut last = 1u16;
        for step in 0..s.len() {
            let mut d = s[step];
            for i in 1..=len.min(c.len() - 1) {
                d ^= self.mul(c[i], s[step - i]);
            }
            if d == 0 {
                shift += 1;
                continue;
            }
            let coef = self.div(d, last);
            let mut next = c.clone();
            if next.len() < b.len() + shift {
                next.resize(b.len() + shift, 0);
            }
            for (i, &bi) in b.iter().enumerate() {
                next[i + shift] ^= self.mul(coef, bi);
            }
            if 2 * len <= step {
                len = step + 1 - len;
                b = c;
                last = d;
                shift = 1;
            } else {
                shift += 1;
            }
            c = next;
        }
        while c.len() > 1 && *c.last().unwrap() == 0 {
            c.pop();
        }
        c
    }
}

fn field_tables(m: usize) -> (Vec<u16>, Vec<u16>) {
    let n = (1usize << m) - 1;
    let poly = PRIMITIVE_POLYS[m];
    let mut exp = vec![0u16; 2 * n];
    let mut log = vec![0u16; n + 1];
    let mut x = 1u32;
    for (i, e) in exp.iter_mut().take(n).enumerate() {
        *e = x as u16;
        log[x as usize] = i as u16;
        x <<= 1;
        if x & (1 << m) != 0 {
            x ^= poly;
        }
    }
    for i in n..2 * n {
        exp[i] = exp[i - n];
    }
    (exp, log)
}

fn cyclotomic_coset(i: usize, n: usize) -> Vec<usize> {
    let mut coset = vec![i];
    let mut j = (2 * i) % n;
    while j != i {
        coset.push(j);
        j = (2 * j) % n;
    }
    coset
}

/// Product of `(x - alpha^j)` over the coset; the coefficients land in GF(2).
fn minimal_polynomial(coset: &[usize], exp: &[u16], log: &[u16], n: usize) -> Vec<bool> {
    let mul = |a: u16, b: u16| -> u16 {
        if a == 0 || b == 0 {
            0
        } else {
            exp[(log[a as usize] as usize + log[b as usize] as usize) % n]
        }
    };
    let mut poly = vec![1u16];
    for &j in coset {
        let root = exp[j];
        let mut next = vec![0u16; poly.len() + 1];
        for (d, &c) in poly.iter().enumerate() {
            next[d + 1] ^= c;
            next[d] ^= mul(c, root);
        }
        poly = next;
    }
    poly.into_iter()
        .map(|c| {
            debug_assert!(c <= 1, "minimal polynomial must be binary");
            c == 1
        })
        .collect()
}

fn poly_mul_gf2(a: &[bool], b: &[bool]) -> Vec<bool> {
    let mut out = vec![false; a.len() + b.len() - 1];
    for (i, &ai) in a.iter().enumerate() {
        if ai {
            for (j, &bj) in b.iter().enumerate() {
                out[i + j] ^= bj;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{seq::index::sample, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn known_parameters() {
        assert_eq!(Bch::new(15, 7).unwrap().t(), 2);
        assert_eq!(Bch::new(15, 11).unwrap().t(), 1);
        assert_eq!(Bch::new(31, 16).unwrap().t(), 3);
        assert_eq!(Bch::new(255, 131).unwrap().t(), 18);
        assert!(Bch::new(15, 8).is_err());
        assert!(Bch::new(16, 8).is_err());
    }

    #[test]
    fn bch_15_7_generator() {
        // x^8 + x^7 + x^6 + x^4 + 1
        let g: Vec<usize> = Bch::new(15, 7)
            .unwrap()
            .generator()
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(g, vec![0, 4, 6, 7, 8]);
    }

    #[test]
    fn zero_codeword() {
        let code = Bch::new(15, 7).unwrap();
        let cw = code.encode(&[false; 7]).unwrap();
        assert!(cw.iter().all(|b| !b));
        assert_eq!(
            code.decode(&cw).unwrap(),
            Decoded {
                message: vec![false; 7],
                corrected: 0
            }
        );
    }

    #[test]
    fn large_code_corrects_t_random_errors() {
        let code = Bch::new(255, 131).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..50 {
            let msg: Vec<bool> = (0..131).map(|_| rng.gen()).collect();
            let mut cw = code.encode(&msg).unwrap();
            let flips = trial % (code.t() + 1);
            for i in sample(&mut rng, 255, flips) {
                cw[i] = !cw[i];
            }
            let out = code.decode(&cw).unwrap();
            assert_eq!(out.message, msg);
            assert_eq!(out.corrected, flips);
        }
    }

    #[test]
    fn three_errors_never_decode_to_the_original_at_15_7() {
        let code = Bch::new(15, 7).unwrap();
        let msg: Vec<bool> = (0..7).map(|i| i % 3 == 0).collect();
        let cw = code.encode(&msg).unwrap();
        for a in 0..15 {
            for b in a + 1..15 {
                for c in b + 1..15 {
                    let mut r = cw.clone();
                    for i in [a, b, c] {
                        r[i] = !r[i];
                    }
                    if let Ok(out) = code.decode(&r) {
                        assert_ne!(out.message, msg);
                    }
                }
            }
        }
    }

    #[test]
    fn wrong_block_length() {
        let code = Bch::new(15, 7).unwrap();
        assert!(matches!(
            code.encode(&[true; 6]),
            Err(PayloadError::BlockLength { expected: 7, got: 6 })
        ));
        assert!(code.decode(&[true; 14]).is_err());
    }
}

//! Levenshtein distance with prefix/suffix trimming and a doubling band, exact
//! in value to the full dynamic program.

/// Edit distance between `a` and `b`.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (a, b) = trim(a, b);
    if a.is_empty() || b.is_empty() {
        return a.len().max(b.len());
    }
    let longest = a.len().max(b.len());
    let mut k = a.len().abs_diff(b.len()).max(16);
    loop {
        if k >= longest {
            return banded(a, b, longest).expect("a full-width band always succeeds");
        }
        if let Some(d) = banded(a, b, k) {
            return d;
        }
        k *= 2;
    }
}

/// Edit distance if it is at most `max`, otherwise `None`.
pub fn levenshtein_within<T: PartialEq>(a: &[T], b: &[T], max: usize) -> Option<usize> {
    let (a, b) = trim(a, b);
    if a.len().abs_diff(b.len()) > max {
        return None;
    }
    if a.is_empty() || b.is_empty() {
        return Some(a.len().max(b.len()));
    }
    banded(a, b, max)
}

/// `levenshtein(a, b) / max(|a|, |b|)`, with two empty strings at distance 0.
pub fn nld<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 0.0;
    }
    levenshtein(a, b) as f64 / longest as f64
}

fn trim<'a, T: PartialEq>(a: &'a [T], b: &'a [T]) -> (&'a [T], &'a [T]) {
    let prefix = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    let (a, b) = (&a[prefix..], &b[prefix..]);
    let suffix = a.iter().rev().zip(b.iter().rev()).take_while(|(x, y)| x == y).count();
    (&a[..a.len() - suffix], &b[..b.len() - suffix])
}

/// Dynamic program restricted to cells with `|i - j| <= k`. Any alignment of
/// cost at most `k` stays inside that band, so a result `<= k` is exact.
fn banded<T: PartialEq>(a: &[T], b: &[T], k: usize) -> Option<usize> {
    const INF: usize = usize::MAX / 2;
    let (n, m) = (a.len(), b.len());
    if n.abs_diff(m) > k {
        return None;
    }
    let mut prev = vec![INF; m + 1];
    let mut cur = vec![INF; m + 1];
    for (j, cell) in prev.iter_mut().enumerate().take(k.min(m) + 1) {
        *cell = j;
    }
    for i in 1..=n {
        let lo = i.saturating_sub(k).max(1);
        let hi = (i + k).min(m);
        cur[lo - 1] = if lo == 1 && i <= k { i } else { INF };
        let mut row_min = cur[lo - 1];
        for j in lo..=hi {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            let del = prev[j] + 1;
            let ins = cur[j - 1] + 1;
            let v = sub.min(del).min(ins);
            cur[j] = v;
            row_min = row_min.min(v);
        }
        if hi < m {
            cur[hi + 1] = INF;
        }
        if row_min > k {
            return None;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let d = prev[m];
    (d <= k).then_some(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textbook(a: &[u8], b: &[u8]) -> usize {
        let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in dp.iter_mut().enumerate() {
            row[0] = i;
        }
        for (j, cell) in dp[0].iter_mut().enumerate() {
            *cell = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                dp[i][j] = (dp[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]))
                    .min(dp[i - 1][j] + 1)
                    .min(dp[i][j - 1] + 1);
            }
        }
        dp[a.len()][b.len()]
    }

    #[test]
    fn hand_example() {
        assert_eq!(levenshtein(b"abc", b"abd"), 1);
        assert!((nld(b"abc", b"abd") - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(nld::<u8>(&[], &[]), 0.0);
        assert_eq!(nld(b"", b"xyz"), 1.0);
        assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
    }

    #[test]
    fn band_agrees_with_textbook_on_long_inputs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let n = rng.gen_range(0..400);
            let a: Vec<u8> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let mut b = a.clone();
            for _ in 0..rng.gen_range(0..60) {
                let at = rng.gen_range(0..=b.len());
                match rng.gen_range(0..3) {
                    0 => b.insert(at, rng.gen_range(0..4)),
                    1 if at < b.len() => {
                        b.remove(at);
                    }
                    _ if at < b.len() => b[at] = rng.gen_range(0..4),
                    _ => {}
                }
            }
            let d = textbook(&a, &b);
            assert_eq!(levenshtein(&a, &b), d);
            assert_eq!(levenshtein_within(&a, &b, d), Some(d));
            if d > 0 {
                assert_eq!(levenshtein_within(&a, &b, d - 1), None);
            }
        }
    }
}

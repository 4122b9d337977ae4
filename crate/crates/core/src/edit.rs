//! Token-level Levenshtein distance.

/// Unit-cost insert/delete/substitute distance between two token slices.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Distance divided by the longer length; 0 for two empty inputs.
pub fn normalized<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let m = a.len().max(b.len());
    if m == 0 {
        0.0
    } else {
        levenshtein(a, b) as f64 / m as f64
    }
}

/// For each index of `a`, the index of `b` it lines up with in one optimal
/// alignment. Deleted tokens map to the position of the next aligned token
/// (clamped to the last index of `b`). `b` must be non-empty.
pub fn alignment_map<T: PartialEq>(a: &[T], b: &[T]) -> Vec<usize> {
    let (n, m) = (a.len(), b.len());
    assert!(m > 0, "alignment target must be non-empty");
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut map = vec![usize::MAX; n];
    let (mut i, mut j) = (n, m);
    while i > 0 {
        if j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]) {
            map[i - 1] = j - 1;
            i -= 1;
            j -= 1;
        } else if d[i][j] == d[i - 1][j] + 1 {
            map[i - 1] = j.min(m - 1);
            i -= 1;
        } else {
            j -= 1;
        }
    }
    map
}

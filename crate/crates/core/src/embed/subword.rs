use std::collections::HashSet;

/// Contiguous character substrings of `word` with length in `[l_min, l_max]`,
/// excluding the whole word. Ordered by length, then by start position;
/// repeats keep their first occurrence.
///
/// No boundary markers are added, so `"where"` with bounds `(2, 4)` yields
/// `wh he er re whe her ere wher here`.
pub fn extract_subwords(word: &str, l_min: usize, l_max: usize) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for len in l_min.max(1)..=l_max.min(n) {
        if len == n {
            break;
        }
        for start in 0..=n - len {
            let piece: String = chars[start..start + len].iter().collect();
            if seen.insert(piece.clone()) {
                out.push(piece);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn where_example() {
        assert_eq!(
            extract_subwords("where", 2, 4),
            ["wh", "he", "er", "re", "whe", "her", "ere", "wher", "here"]
        );
    }

    #[test]
    fn too_short() {
        assert!(extract_subwords("a", 2, 4).is_empty());
    }

    #[test]
    fn whole_word_excluded() {
        assert_eq!(extract_subwords("abc", 2, 4), ["ab", "bc"]);
    }

    #[test]
    fn duplicates_removed() {
        assert_eq!(extract_subwords("aaaa", 2, 3), ["aa", "aaa"]);
    }

    /// Brute-force enumeration of all (start, end) pairs.
    fn oracle(word: &str, l_min: usize, l_max: usize) -> HashSet<String> {
        let chars: Vec<char> = word.chars().collect();
        let mut set = HashSet::new();
        for i in 0..chars.len() {
            for j in i + 1..=chars.len() {
                let len = j - i;
                if len >= l_min && len <= l_max && len != chars.len() {
                    set.insert(chars[i..j].iter().collect());
                }
            }
        }
        set
    }

    proptest! {
        #[test]
        fn matches_enumeration(word in "[a-d]{1,9}", l_min in 1usize..4, extra in 0usize..4) {
            let l_max = l_min + extra;
            let got = extract_subwords(&word, l_min, l_max);
            let set: HashSet<String> = got.iter().cloned().collect();
            prop_assert_eq!(set.len(), got.len());
            prop_assert_eq!(set, oracle(&word, l_min, l_max));
        }

        #[test]
        fn count_formula_without_repeats(word in "[a-z]{1,12}", l_min in 1usize..4, extra in 0usize..4) {
            let l_max = l_min + extra;
            let n = word.chars().count();
            let distinct: HashSet<char> = word.chars().collect();
            prop_assume!(distinct.len() == n);
            let mut expected: usize = (l_min..=l_max.min(n)).map(|l| n - l + 1).sum();
            if n <= l_max && n >= l_min {
                expected -= 1;
            }
            prop_assert_eq!(extract_subwords(&word, l_min, l_max).len(), expected);
        }
    }
}

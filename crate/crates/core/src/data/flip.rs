//! Left/right landmark correspondences used when mirroring a face.

/// 1-indexed mirror pairs of the 68-point mark-up; unlisted points
/// (nose ridge, lip centres, chin) map to themselves.
const PAIRS_68: [(usize, usize); 29] = [
    (1, 17),
    (2, 16),
    (3, 15),
    (4, 14),
    (5, 13),
    (6, 12),
    (7, 11),
    (8, 10),
    (18, 27),
    (19, 26),
    (20, 25),
    (21, 24),
    (22, 23),
    (32, 36),
    (33, 35),
    (37, 46),
    (38, 45),
    (39, 44),
    (40, 43),
    (41, 48),
    (42, 47),
    (49, 55),
    (50, 54),
    (51, 53),
    (56, 60),
    (57, 59),
    (61, 65),
    (62, 64),
    (66, 68),
];

fn from_pairs(n: usize, pairs: &[(usize, usize)]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for &(a, b) in pairs {
        perm[a - 1] = b - 1;
        perm[b - 1] = a - 1;
    }
    perm
}

/// 0-indexed 68-point flip permutation.
pub fn flip_68() -> Vec<usize> {
    from_pairs(68, &PAIRS_68)
}

/// Eye centres, nose tip, mouth corners.
pub fn flip_5() -> Vec<usize> {
    vec![1, 0, 2, 4, 3]
}

/// Flip permutation for the supported mark-ups.
pub fn flip_permutation(n: usize) -> Option<Vec<usize>> {
    match n {
        68 => Some(flip_68()),
        5 => Some(flip_5()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn involution_and_bijection() {
        for perm in [flip_68(), flip_5()] {
            let n = perm.len();
            let mut seen = vec![false; n];
            for (i, &j) in perm.iter().enumerate() {
                assert_eq!(perm[j], i);
                assert!(!seen[j]);
                seen[j] = true;
            }
        }
    }

    #[test]
    fn fixed_points_of_the_68_table() {
        let perm = flip_68();
        let fixed: Vec<usize> = (0..68).filter(|&i| perm[i] == i).map(|i| i + 1).collect();
        assert_eq!(fixed, vec![9, 28, 29, 30, 31, 34, 52, 58, 63, 67]);
    }
}

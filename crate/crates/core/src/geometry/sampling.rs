use tokcomm_tensor::RandomSource;

use super::{sq_dist, sub, CentroidSet, NeighborTable, Point};
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpsStart {
    /// Start from a seeded random point.
    Random,
    /// Start from the given index.
    Index(usize),
}

/// Farthest point sampling: each new centroid maximises its minimum
/// distance to the centroids chosen so far. Ties go to the lower index.
pub fn fps(
    points: &[Point],
    count: usize,
    start: FpsStart,
    source: &mut RandomSource,
) -> Result<CentroidSet> {
    let n = points.len();
    if count == 0 || count > n {
        return Err(CoreError::Argument(format!(
            "fps count {count} must lie in 1..={n}"
        )));
    }
    let first = match start {
        FpsStart::Random => source.index(n),
        FpsStart::Index(i) if i < n => i,
        FpsStart::Index(i) => {
            return Err(CoreError::Argument(format!("fps start {i} out of range")));
        }
    };
    let mut selected = vec![false; n];
    let mut dist = vec![f64::INFINITY; n];
    let mut indices = Vec::with_capacity(count);
    let mut current = first;
    loop {
        selected[current] = true;
        indices.push(current);
        if indices.len() == count {
            break;
        }
        let c = points[current];
        let mut best: Option<usize> = None;
        for i in 0..n {
            let d = sq_dist(&points[i], &c);
            if d < dist[i] {
                dist[i] = d;
            }
            if !selected[i] && best.is_none_or(|b| dist[i] > dist[b]) {
                best = Some(i);
            }
        }
        current = best.expect("count <= n leaves an unselected point");
    }
    let coords = indices.iter().map(|&i| points[i]).collect();
    Ok(CentroidSet { indices, coords })
}

/// Fixed-radius grouping. In-radius candidates are ordered by descending
/// index and the first `k` kept; short rows are padded with the smallest
/// in-radius index. The descending rule favours later points.
pub fn ball_query(
    points: &[Point],
    centroids: &[Point],
    radius: f64,
    k: usize,
) -> Result<NeighborTable> {
    if !(radius > 0.0) || k == 0 {
        return Err(CoreError::Argument(format!(
            "ball query needs radius > 0 and K >= 1 (radius {radius}, K {k})"
        )));
    }
    let r2 = radius * radius;
    let mut indices = Vec::with_capacity(centroids.len() * k);
    let mut relative = Vec::with_capacity(centroids.len() * k);
    for (ci, c) in centroids.iter().enumerate() {
        let mut inside: Vec<usize> = (0..points.len())
            .rev()
            .filter(|&i| sq_dist(&points[i], c) <= r2)
            .collect();
        let Some(&smallest) = inside.last() else {
            return Err(CoreError::Contract(format!(
                "centroid {ci} has no points within radius {radius}"
            )));
        };
        inside.truncate(k);
        inside.resize(k, smallest);
        for &i in &inside {
            relative.push(sub(&points[i], c));
        }
        indices.extend(inside);
    }
    Ok(NeighborTable {
        k,
        indices,
        relative,
    })
}

/// Exact k nearest neighbours of each query in `reference`, nearest first,
/// distance ties broken by lower index.
pub fn knn(queries: &[Point], reference: &[Point], k: usize) -> Result<NeighborTable> {
    if k == 0 || k > reference.len() {
        return Err(CoreError::Argument(format!(
            "knn k = {k} must lie in 1..={}",
            reference.len()
        )));
    }
    let mut indices = Vec::with_capacity(queries.len() * k);
    let mut relative = Vec::with_capacity(queries.len() * k);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(reference.len());
    for q in queries {
        order.clear();
        order.extend(reference.iter().enumerate().map(|(i, p)| (sq_dist(p, q), i)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_by(cmp);
        for &(_, i) in order.iter().take(k) {
            indices.push(i);
            relative.push(sub(&reference[i], q));
        }
    }
    Ok(NeighborTable {
        k,
        indices,
        relative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line() -> Vec<Point> {
        vec![[0.0, 0.0, 0.0], [0.4, 0.0, 0.0], [1.0, 0.0, 0.0]]
    }

    #[test]
    fn fps_picks_far_end() {
        let mut rng = RandomSource::new(0);
        let c = fps(&line(), 2, FpsStart::Index(0), &mut rng).unwrap();
        assert_eq!(c.indices, vec![0, 2]);
        let all = fps(&line(), 3, FpsStart::Index(0), &mut rng).unwrap();
        assert_eq!(all.indices, vec![0, 2, 1]);
        assert!(fps(&line(), 4, FpsStart::Index(0), &mut rng).is_err());
    }

    #[test]
    fn fps_handles_duplicate_points() {
        let pts = vec![[0.0; 3]; 4];
        let c = fps(&pts, 4, FpsStart::Index(0), &mut RandomSource::new(0)).unwrap();
        let mut idx = c.indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2, 3]);
    }

    #[test]
    fn ball_query_descending_then_padding() {
        let pts = vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let t = ball_query(&pts, &[pts[0]], 0.5, 2).unwrap();
        assert_eq!(t.indices, vec![1, 0]);
        let t = ball_query(&pts, &[pts[0]], 0.5, 4).unwrap();
        assert_eq!(t.indices, vec![1, 0, 0, 0]);
        assert_eq!(t.relative[0], [0.1, 0.0, 0.0]);
    }

    #[test]
    fn ball_query_empty_ball_is_contract_error() {
        let pts = vec![[0.0, 0.0, 0.0]];
        let err = ball_query(&pts, &[[5.0, 0.0, 0.0]], 0.5, 2);
        assert!(matches!(err, Err(CoreError::Contract(_))));
        assert!(matches!(
            ball_query(&pts, &[pts[0]], 0.0, 2),
            Err(CoreError::Argument(_))
        ));
    }

    #[test]
    fn knn_basics() {
        let pts = line();
        let t = knn(&[pts[1]], &pts, 1).unwrap();
        assert_eq!(t.indices, vec![1]);
        let t = knn(&[pts[1]], &pts, 3).unwrap();
        assert_eq!(t.indices, vec![1, 0, 2]);
        assert!(knn(&[pts[1]], &pts, 4).is_err());
    }

    #[test]
    fn knn_tie_goes_to_lower_index() {
        let pts = vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let t = knn(&[[0.0; 3]], &pts, 2).unwrap();
        assert_eq!(t.indices, vec![0, 1]);
    }
}

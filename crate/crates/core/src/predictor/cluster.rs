use std::collections::BTreeMap;

use crate::kinematics::NodeId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cluster {
    /// Bucket index `floor(aoi / width)`.
    pub bucket: i64,
    /// Smallest id in the cluster; it runs the forecast for the rest.
    pub representative: NodeId,
    pub members: Vec<NodeId>,
}

/// Groups nodes whose AoI falls in the same `[k*w, (k+1)*w)` bucket.
/// Clusters come out in bucket order, members in id order.
pub fn cluster_nodes(predicted: &BTreeMap<NodeId, f64>, bucket_width: f64) -> Vec<Cluster> {
    let mut buckets: BTreeMap<i64, Vec<NodeId>> = BTreeMap::new();
    for (&id, &aoi) in predicted {
        let k = if bucket_width.is_finite() && bucket_width > 0.0 {
            (aoi / bucket_width).floor() as i64
        } else {
            0
        };
        buckets.entry(k).or_default().push(id);
    }
    buckets
        .into_iter()
        .map(|(bucket, members)| Cluster {
            bucket,
            representative: members[0],
            members,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(v: &[(NodeId, f64)]) -> BTreeMap<NodeId, f64> {
        v.iter().copied().collect()
    }

    #[test]
    fn hand_bucketed() {
        let c = cluster_nodes(&map(&[(1, 100.0), (2, 104.0), (3, 250.0)]), 10.0);
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].members, vec![1, 2]);
        assert_eq!(c[1].members, vec![3]);
    }

    #[test]
    fn infinite_width_is_one_cluster() {
        let c = cluster_nodes(&map(&[(1, 1.0), (2, 900.0), (3, 50.0)]), f64::INFINITY);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].representative, 1);
    }

    #[test]
    fn distinct_buckets_are_singletons() {
        let c = cluster_nodes(&map(&[(1, 5.0), (2, 15.0), (3, 25.0)]), 10.0);
        assert!(c.iter().all(|c| c.members.len() == 1));
    }

    proptest! {
        #[test]
        fn output_is_partition(v in proptest::collection::btree_map(0u32..100, 0.0..1000.0f64, 0..40), w in 0.5..200.0f64) {
            let c = cluster_nodes(&v, w);
            let mut seen: Vec<NodeId> = c.iter().flat_map(|c| c.members.clone()).collect();
            seen.sort();
            prop_assert_eq!(seen, v.keys().copied().collect::<Vec<_>>());
        }
    }
}

use std::str::FromStr;

use super::{SceneDesc, SceneError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionStrategy {
    /// Triangle `i` goes to rank `i mod R`.
    RoundRobin,
    /// Equal-count slabs along the scene's longest axis.
    SpatialSlab,
    /// The document's `rankOfPrim`, folded by `source mod R`.
    FromFile,
}

impl FromStr for PartitionStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "roundrobin" | "round-robin" => Ok(PartitionStrategy::RoundRobin),
            "slab" | "spatialslab" | "spatial-slab" => Ok(PartitionStrategy::SpatialSlab),
            "fromfile" | "from-file" | "file" => Ok(PartitionStrategy::FromFile),
            other => Err(format!("unknown partition strategy `{other}`")),
        }
    }
}

/// Assignment of every triangle (by position in the scene) to exactly one rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub rank_of_prim: Vec<u32>,
    /// Per-rank triangle positions, ascending.
    pub local_sets: Vec<Vec<u32>>,
}

impl Partition {
    pub fn from_assignment(rank_of_prim: Vec<u32>, ranks: usize) -> Partition {
        let mut local_sets = vec![Vec::new(); ranks];
        for (i, &r) in rank_of_prim.iter().enumerate() {
            local_sets[r as usize].push(i as u32);
        }
        Partition {
            rank_of_prim,
            local_sets,
        }
    }

    pub fn ranks(&self) -> usize {
        self.local_sets.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.local_sets.iter().map(Vec::len).collect()
    }
}

pub fn partition_scene(
    scene: &SceneDesc,
    ranks: usize,
    strategy: PartitionStrategy,
) -> Result<Partition, SceneError> {
    if ranks == 0 {
        return Err(SceneError::NoRanks);
    }
    let n = scene.triangles.len();
    let r = ranks as u64;
    let rank_of_prim: Vec<u32> = match strategy {
        PartitionStrategy::RoundRobin => (0..n as u64).map(|i| (i % r) as u32).collect(),
        PartitionStrategy::FromFile => {
            let src = scene
                .rank_of_prim
                .as_ref()
                .ok_or(SceneError::MissingAssignment)?;
            src.iter().map(|&s| (s as u64 % r) as u32).collect()
        }
        PartitionStrategy::SpatialSlab => {
            let axis = scene.bounds().extent().max_axis();
            let mut order: Vec<(f64, u64, usize)> = scene
                .triangles
                .iter()
                .enumerate()
                .map(|(i, t)| (t.centroid()[axis], t.global_id, i))
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut out = vec![0u32; n];
            for rank in 0..ranks {
                let lo = rank * n / ranks;
                let hi = (rank + 1) * n / ranks;
                for &(_, _, i) in &order[lo..hi] {
                    out[i] = rank as u32;
                }
            }
            out
        }
    };
    Ok(Partition::from_assignment(rank_of_prim, ranks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Aabb, Triangle, Vec3};
    use crate::scene::{generate_uneven_cloud, parse_scene};
    use proptest::prelude::*;

    fn line_scene(n: usize) -> SceneDesc {
        // reverse order so slab order differs from position order
        let triangles = (0..n)
            .map(|i| {
                let x = (n - 1 - i) as f64;
                Triangle::new(
                    Vec3::new(x, 0.0, 0.0),
                    Vec3::new(x + 0.5, 0.0, 0.0),
                    Vec3::new(x, 0.5, 0.0),
                    i as u64,
                )
            })
            .collect();
        SceneDesc {
            triangles,
            material_of_prim: vec![0; n],
            ..SceneDesc::default()
        }
    }

    #[test]
    fn round_robin_is_modular() {
        let p = partition_scene(&line_scene(10), 2, PartitionStrategy::RoundRobin).unwrap();
        assert_eq!(p.local_sets[0], vec![0, 2, 4, 6, 8]);
        assert_eq!(p.local_sets[1], vec![1, 3, 5, 7, 9]);
    }

    #[test]
    fn spatial_slab_cuts_in_coordinate_order() {
        let s = line_scene(9);
        let p = partition_scene(&s, 3, PartitionStrategy::SpatialSlab).unwrap();
        // positions 8,7,6 have x = 0,1,2
        assert_eq!(p.local_sets[0], vec![6, 7, 8]);
        assert_eq!(p.local_sets[1], vec![3, 4, 5]);
        assert_eq!(p.local_sets[2], vec![0, 1, 2]);
    }

    #[test]
    fn explicit_assignment_is_honored() {
        let doc = r#"{
            "triangles": [[0,0,0, 1,0,0, 0,1,0], [0,0,1, 1,0,1, 0,1,1], [0,0,2, 1,0,2, 0,1,2]],
            "materials": [{"albedo": [1,1,1]}],
            "rankOfPrim": [0, 1, 0],
            "background": [0,0,0]
        }"#;
        let s = parse_scene(doc.as_bytes()).unwrap();
        let p = partition_scene(&s, 2, PartitionStrategy::FromFile).unwrap();
        assert_eq!(p.rank_of_prim, vec![0, 1, 0]);
        assert_eq!(p.local_sets, vec![vec![0, 2], vec![1]]);
    }

    #[test]
    fn from_file_folds_extra_source_ranks() {
        let mut s = line_scene(4);
        s.rank_of_prim = Some(vec![0, 1, 2, 3]);
        let p = partition_scene(&s, 2, PartitionStrategy::FromFile).unwrap();
        assert_eq!(p.rank_of_prim, vec![0, 1, 0, 1]);
    }

    #[test]
    fn from_file_without_assignment_fails() {
        let err = partition_scene(&line_scene(3), 2, PartitionStrategy::FromFile).unwrap_err();
        assert!(matches!(err, SceneError::MissingAssignment));
        assert!(matches!(
            partition_scene(&line_scene(3), 0, PartitionStrategy::RoundRobin),
            Err(SceneError::NoRanks)
        ));
    }

    #[test]
    fn uneven_cloud_slabs_have_unequal_volumes() {
        let s = generate_uneven_cloud(1, 10_000, 4);
        let p = partition_scene(&s, 4, PartitionStrategy::SpatialSlab).unwrap();
        let volumes: Vec<f64> = p
            .local_sets
            .iter()
            .map(|set| {
                set.iter()
                    .fold(Aabb::EMPTY, |b, &i| {
                        b.union(&s.triangles[i as usize].bounds())
                    })
                    .volume()
            })
            .collect();
        let max = volumes.iter().cloned().fold(f64::MIN, f64::max);
        let min = volumes.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max / min > 1.5, "volumes {volumes:?}");
    }

    proptest! {
        #[test]
        fn partitions_never_drop_or_duplicate(seed in 0u64..1000, n in 1usize..300, ranks in 1usize..9, which in 0usize..3) {
            let s = generate_uneven_cloud(seed, n, n.min(3));
            let strategy = [PartitionStrategy::RoundRobin, PartitionStrategy::SpatialSlab, PartitionStrategy::FromFile][which];
            let p = partition_scene(&s, ranks, strategy).unwrap();
            prop_assert_eq!(p.ranks(), ranks);
            prop_assert_eq!(p.counts().iter().sum::<usize>(), n);
            let mut all: Vec<u32> = p.local_sets.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n as u32).collect::<Vec<_>>());
            for (rank, set) in p.local_sets.iter().enumerate() {
                for &i in set {
                    prop_assert_eq!(p.rank_of_prim[i as usize] as usize, rank);
                }
            }
        }
    }
}

//! Instance segmentation on top of the two-channel (foreground, boundary)
//! prediction: connected components pick out seed regions, and a seeded
//! watershed on the boundary height map splits touching objects.

use crate::error::{Error, Result};
use crate::image::{LabelMask, SegmentationOutput};
use ndarray::Array2;
use std::collections::BinaryHeap;

/// Per-pixel instance ids; 0 is background, instances are 1..=count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceLabeling {
    pub labels: Array2<u16>,
    pub instance_count: usize,
}

impl InstanceLabeling {
    pub fn empty(shape: (usize, usize)) -> Self {
        Self {
            labels: Array2::zeros(shape),
            instance_count: 0,
        }
    }
}

/// Pixel adjacency for component search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

/// Maximal connected regions of the mask, labeled 1..=C in row-major
/// discovery order (breadth-first), so the labeling is deterministic.
pub fn connected_components(mask: &LabelMask, connectivity: Connectivity) -> Result<InstanceLabeling> {
    let (h, w) = mask.pixels().dim();
    let m = mask.pixels();
    let mut labels = Array2::<u16>::zeros((h, w));
    let mut count: usize = 0;
    let mut queue = std::collections::VecDeque::new();
    for i in 0..h {
        for j in 0..w {
            if m[[i, j]] == 0 || labels[[i, j]] != 0 {
                continue;
            }
            count += 1;
            let id = u16::try_from(count)
                .map_err(|_| Error::InvalidInput("more than 65535 components".into()))?;
            labels[[i, j]] = id;
            queue.push_back((i, j));
            while let Some((y, x)) = queue.pop_front() {
                for &(dy, dx) in connectivity.offsets() {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny as usize >= h || nx as usize >= w {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if m[[ny, nx]] == 1 && labels[[ny, nx]] == 0 {
                        labels[[ny, nx]] = id;
                        queue.push_back((ny, nx));
                    }
                }
            }
        }
    }
    Ok(InstanceLabeling {
        labels,
        instance_count: count,
    })
}

/// Heap entry ordered by (height key, insertion sequence); the `Ord`
/// implementation inverts the comparison so `BinaryHeap` pops the lowest
/// key first and breaks ties first-in-first-out.
#[derive(Debug, PartialEq)]
struct Flood {
    key: f64,
    seq: u64,
    y: usize,
    x: usize,
    label: u16,
}

impl Eq for Flood {}

impl Ord for Flood {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .key
            .total_cmp(&self.key)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Flood {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

fn check_watershed_inputs(
    height: &Array2<f64>,
    seeds: &InstanceLabeling,
    mask: &LabelMask,
) -> Result<()> {
    let shape = height.dim();
    if seeds.labels.dim() != shape || mask.pixels().dim() != shape {
        return Err(Error::shape_mismatch(
            "watershed inputs",
            shape,
            (seeds.labels.dim(), mask.pixels().dim()),
        ));
    }
    if height.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("watershed height map".into()));
    }
    for ((i, j), &s) in seeds.labels.indexed_iter() {
        if s != 0 && mask.pixels()[[i, j]] == 0 {
            return Err(Error::InvalidInput(format!(
                "seed at ({i}, {j}) lies outside the mask"
            )));
        }
    }
    Ok(())
}

/// Seeded watershed by priority flood. Every masked pixel takes the label
/// of the seed it can reach along the path whose highest point is lowest;
/// the flood pops pixels in increasing height order with FIFO tie-breaks,
/// which makes the result deterministic. Seed pixels keep their labels;
/// masked pixels unreachable from any seed stay 0. With no seeds inside
/// the mask, a warning is printed and the labeling is empty.
pub fn watershed(
    height: &Array2<f64>,
    seeds: &InstanceLabeling,
    mask: &LabelMask,
) -> Result<InstanceLabeling> {
    check_watershed_inputs(height, seeds, mask)?;
    let (h, w) = height.dim();
    if seeds.labels.iter().all(|&s| s == 0) {
        if mask.pixels().iter().any(|&m| m == 1) {
            eprintln!("warning: watershed received no seeds inside the mask; returning empty labeling");
        }
        return Ok(InstanceLabeling::empty((h, w)));
    }
    let mut labels = Array2::<u16>::zeros((h, w));
    let mut heap = BinaryHeap::new();
    let mut seq: u64 = 0;
    for ((i, j), &s) in seeds.labels.indexed_iter() {
        if s != 0 {
            heap.push(Flood {
                key: height[[i, j]],
                seq,
                y: i,
                x: j,
                label: s,
            });
            seq += 1;
        }
    }
    while let Some(Flood { key, y, x, label, .. }) = heap.pop() {
        if labels[[y, x]] != 0 {
            continue;
        }
        labels[[y, x]] = label;
        for &(dy, dx) in Connectivity::Four.offsets() {
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            if ny < 0 || nx < 0 || ny as usize >= h || nx as usize >= w {
                continue;
            }
            let (ny, nx) = (ny as usize, nx as usize);
            if mask.pixels()[[ny, nx]] == 1 && labels[[ny, nx]] == 0 {
                heap.push(Flood {
                    // the path maximum so far, not just the local height
                    key: key.max(height[[ny, nx]]),
                    seq,
                    y: ny,
                    x: nx,
                    label,
                });
                seq += 1;
            }
        }
    }
    // seeds override whatever flooded over them
    for ((i, j), &s) in seeds.labels.indexed_iter() {
        if s != 0 {
            labels[[i, j]] = s;
        }
    }
    Ok(InstanceLabeling {
        labels,
        instance_count: seeds.instance_count,
    })
}

/// Full instance pipeline on a two-channel prediction: threshold the
/// foreground into a mask, take connected components of
/// `foreground - boundary >= seed_threshold` as seeds, and flood the
/// boundary height map.
pub fn instances_from_prediction(
    seg: &SegmentationOutput,
    fg_threshold: f64,
    seed_threshold: f64,
) -> Result<InstanceLabeling> {
    if seg.classes() != 2 {
        return Err(Error::shape_mismatch(
            "instance prediction channels",
            2usize,
            seg.classes(),
        ));
    }
    let fg = seg.class_plane(0);
    let boundary = seg.class_plane(1);
    let mask = LabelMask::from_probabilities_at(&fg, fg_threshold)?;
    let seed_mask = LabelMask::new(Array2::from_shape_fn(fg.dim(), |(i, j)| {
        u8::from(fg[[i, j]] - boundary[[i, j]] >= seed_threshold)
    }))?;
    let seeds = connected_components(&seed_mask, Connectivity::Four)?;
    watershed(&boundary, &seeds, &mask)
}

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use goalnav::oracle::{expert_actions, geodesic_distance};
use goalnav::simcore::{Action, AgentPose, Heading};
use goalnav::worldgen::{CellContent, ObjectInstance, SceneParts, Tile};
use goalnav::{Cell, Scene, Taxonomy};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Distances by repeated relaxation until a fixed point: footprint cells of
/// the goal are 0 and each walkable cell is 1 + min over its neighbors.
pub fn relaxed_object_distance(scene: &Scene, tax: &Taxonomy, goal: usize) -> Vec<Option<u32>> {
    let mut d: Vec<Option<u32>> = (0..scene.num_cells())
        .map(|i| match scene.content(scene.cell_at(i)) {
            CellContent::Object(k) if tax.fine_to_coarse(scene.instances()[k].fine_id).unwrap() == goal => Some(0),
            _ => None,
        })
        .collect();
    loop {
        let mut changed = false;
        for i in 0..scene.num_cells() {
            let c = scene.cell_at(i);
            if !scene.is_walkable(c) {
                continue;
            }
            let best = c
                .neighbors4()
                .into_iter()
                .filter(|&n| scene.in_bounds(n))
                .filter_map(|n| d[scene.index(n)])
                .min()
                .map(|m| m + 1);
            if best.is_some() && (d[i].is_none() || best < d[i]) {
                d[i] = best;
                changed = true;
            }
        }
        if !changed {
            return d;
        }
    }
}

pub struct Oracle {
    /// Minimal (forward moves, total actions) to a success cell, lexicographic.
    pub lexicographic: Option<(u32, u32)>,
    /// Minimal total actions ignoring the forward-count constraint.
    pub unconstrained: Option<u32>,
}

pub fn dijkstra(scene: &Scene, dist: &[Option<u32>], radius: u32, start: AgentPose) -> Oracle {
    let in_region = |c: Cell| dist[scene.index(c)].is_some_and(|d| d <= radius);
    let idx = |c: Cell, h: Heading| scene.index(c) * 4 + h.index() as usize;
    let mut best = vec![None; scene.num_cells() * 4];
    let mut heap = BinaryHeap::new();
    heap.push(Reverse(((0u32, 0u32), start.cell.x, start.cell.y, start.heading.index())));
    let mut lexicographic = None;
    while let Some(Reverse((cost, x, y, h))) = heap.pop() {
        let c = Cell::new(x, y);
        let h = Heading::new(h).unwrap();
        if best[idx(c, h)].is_some() {
            continue;
        }
        best[idx(c, h)] = Some(cost);
        if in_region(c) {
            lexicographic = Some(cost);
            break;
        }
        let (dx, dy) = h.delta();
        let mut next = vec![((cost.0, cost.1 + 1), c, h.left()), ((cost.0, cost.1 + 1), c, h.right())];
        let ahead = c.offset(dx, dy);
        if scene.is_walkable(ahead) {
            next.push(((cost.0 + 1, cost.1 + 1), ahead, h));
        }
        for (nc, cell, head) in next {
            if best[idx(cell, head)].is_none() {
                heap.push(Reverse((nc, cell.x, cell.y, head.index())));
            }
        }
    }
    // plain breadth-first search on action count
    let mut seen = vec![false; scene.num_cells() * 4];
    let mut frontier = vec![start];
    seen[idx(start.cell, start.heading)] = true;
    let mut unconstrained = None;
    let mut depth = 0;
    'outer: while !frontier.is_empty() {
        let mut next = Vec::new();
        for p in frontier {
            if in_region(p.cell) {
                unconstrained = Some(depth);
                break 'outer;
            }
            let (dx, dy) = p.heading.delta();
            let ahead = p.cell.offset(dx, dy);
            let mut cand = vec![AgentPose::new(p.cell, p.heading.left()), AgentPose::new(p.cell, p.heading.right())];
            if scene.is_walkable(ahead) {
                cand.push(AgentPose::new(ahead, p.heading));
            }
            for q in cand {
                if !seen[idx(q.cell, q.heading)] {
                    seen[idx(q.cell, q.heading)] = true;
                    next.push(q);
                }
            }
        }
        frontier = next;
        depth += 1;
    }
    Oracle {
        lexicographic,
        unconstrained,
    }
}

/// Compare the expert against the oracles for one (start, goal, radius).
/// Returns whether the expert also hit the unconstrained minimum.
pub fn check_case(scene: &Scene, tax: &Taxonomy, start: AgentPose, goal: usize, radius: u32, dist: &[Option<u32>]) -> Option<bool> {
    let oracle = dijkstra(scene, dist, radius, start);
    let plan = expert_actions(scene, tax, start, goal, radius);
    let Some((forwards, total)) = oracle.lexicographic else {
        assert!(plan.is_err(), "expert planned an unreachable case");
        return None;
    };
    let plan = plan.unwrap_or_else(|e| panic!("{e} at {start:?} goal {goal}"));
    assert_eq!(plan.last(), Some(&Action::Stop));
    let moves = &plan[..plan.len() - 1];
    assert_eq!(moves.len() as u32, total, "action count at {start:?}, goal {goal}, radius {radius}");
    let f = moves.iter().filter(|&&a| a == Action::MoveForward).count() as u32;
    assert_eq!(f, forwards);
    let geo = dist[scene.index(start.cell)].unwrap().saturating_sub(radius);
    assert_eq!(f, geo, "forward moves equal the geodesic distance");
    assert_eq!(geodesic_distance(scene, tax, start.cell, goal, radius), Some(geo));
    assert!(moves.iter().all(|a| matches!(a, Action::MoveForward | Action::TurnLeft | Action::TurnRight)));
    assert!(total <= 3 * geo + 1);
    let unconstrained = oracle.unconstrained.unwrap();
    assert!(unconstrained <= total);
    Some(unconstrained == total)
}

pub fn small_fixture(rng: &mut ChaCha8Rng, tax: &Taxonomy, id: usize) -> Option<Scene> {
    let w = rng.gen_range(4..=8);
    let h = rng.gen_range(4..=8);
    let mut occupancy = vec![Tile::Free; w * h];
    for y in 0..h {
        for x in 0..w {
            if x == 0 || y == 0 || x == w - 1 || y == h - 1 || rng.gen_bool(0.15) {
                occupancy[y * w + x] = Tile::Wall;
            }
        }
    }
    let free: Vec<Cell> = (0..w * h)
        .filter(|&i| occupancy[i] == Tile::Free)
        .map(|i| Cell::new((i % w) as i32, (i / w) as i32))
        .collect();
    if free.len() < 4 {
        return None;
    }
    let goal_fines: Vec<usize> = tax.goal_categories().iter().flat_map(|&g| tax.fine_ids_of_coarse(g)).collect();
    let mut used = std::collections::HashSet::new();
    let mut instances = Vec::new();
    for k in 0..rng.gen_range(1..=3u32) {
        let c = *free.choose(rng).unwrap();
        if !used.insert(c) {
            continue;
        }
        let mut footprint = vec![c];
        let n = c.offset(1, 0);
        if rng.gen_bool(0.4) && free.contains(&n) && used.insert(n) {
            footprint.push(n);
        }
        instances.push(ObjectInstance {
            instance_id: k + 1,
            fine_id: *goal_fines.choose(rng).unwrap(),
            footprint,
            instance_color: [rng.gen(), rng.gen(), rng.gen()],
        });
    }
    let walkable: Vec<Cell> = free.iter().copied().filter(|c| !used.contains(c)).collect();
    let seed_cell = *walkable.first()?;
    let parts = |spawns: Vec<Cell>| SceneParts {
        scene_id: format!("small-{id}"),
        width: w,
        height: h,
        cell_size_m: 0.25,
        occupancy: occupancy.clone(),
        instances: instances.clone(),
        spawn_cells: spawns,
        texture_seed: 0,
    };
    let probe = Scene::new(parts(vec![seed_cell]), tax).ok()?;
    let reach = probe.flood_from(seed_cell);
    let spawns: Vec<Cell> = walkable.into_iter().filter(|&c| reach[probe.index(c)]).collect();
    Scene::new(parts(spawns), tax).ok()
}

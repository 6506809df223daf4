//! Scene model, scene files, the procedural house generator and the
//! instance-color resampling used as the appearance shift.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::taxonomy::Taxonomy;

pub const DEFAULT_CELL_SIZE_M: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[i32; 2]", into = "[i32; 2]")]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Cell {
        Cell { x, y }
    }

    pub fn offset(self, dx: i32, dy: i32) -> Cell {
        Cell::new(self.x + dx, self.y + dy)
    }

    pub fn neighbors4(self) -> [Cell; 4] {
        [
            self.offset(1, 0),
            self.offset(0, 1),
            self.offset(-1, 0),
            self.offset(0, -1),
        ]
    }
}

impl From<[i32; 2]> for Cell {
    fn from(v: [i32; 2]) -> Self {
        Cell::new(v[0], v[1])
    }
}

impl From<Cell> for [i32; 2] {
    fn from(c: Cell) -> Self {
        [c.x, c.y]
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tile {
    Free,
    Wall,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub instance_id: u32,
    pub fine_id: usize,
    pub footprint: Vec<Cell>,
    pub instance_color: [u8; 3],
}

/// What occupies a grid cell, as seen by the renderer and the dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellContent {
    Free,
    Wall,
    /// Index into `Scene::instances`.
    Object(usize),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SceneError {
    #[error("occupancy has {got} cells, expected {expected}")]
    OccupancyLength { got: usize, expected: usize },
    #[error("invalid occupancy character `{0}`")]
    OccupancyChar(char),
    #[error("grid dimensions must be positive")]
    EmptyGrid,
    #[error("duplicate instance id {0}")]
    DuplicateInstanceId(u32),
    #[error("instance {0} has an empty footprint")]
    EmptyFootprint(u32),
    #[error("instance {id} has fine id {fine} outside the taxonomy")]
    UnknownFine { id: u32, fine: usize },
    #[error("instance {id} footprint cell {cell} is outside the grid")]
    FootprintOutOfBounds { id: u32, cell: Cell },
    #[error("instance {id} footprint cell {cell} is a wall")]
    FootprintOnWall { id: u32, cell: Cell },
    #[error("instances {first} and {second} overlap at {cell}")]
    OverlappingFootprints { first: u32, second: u32, cell: Cell },
    #[error("scene has no spawn cells")]
    NoSpawns,
    #[error("spawn {0} is outside the grid")]
    SpawnOutOfBounds(Cell),
    #[error("spawn {0} is a wall")]
    SpawnOnWall(Cell),
    #[error("spawn {cell} is covered by instance {id}")]
    SpawnOnFootprint { cell: Cell, id: u32 },
    #[error("spawn {0} is not connected to the other spawns")]
    SpawnDisconnected(Cell),
    #[error("cell size must be positive and finite")]
    BadCellSize,
}

#[derive(Debug, Error)]
pub enum SceneIoError {
    #[error("scene i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("scene schema: {0}")]
    Schema(#[from] serde_json::Error),
    #[error("scene invariant: {0}")]
    Invalid(#[from] SceneError),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GenError {
    #[error("bad generation config: {0}")]
    BadConfig(String),
    #[error("generation infeasible after {attempts} attempts: {reason}")]
    Infeasible { attempts: usize, reason: String },
}

/// Validated, immutable scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    scene_id: String,
    width: usize,
    height: usize,
    cell_size_m: f64,
    occupancy: Vec<Tile>,
    instances: Vec<ObjectInstance>,
    spawn_cells: Vec<Cell>,
    texture_seed: u64,
    content: Vec<CellContent>,
}

/// Unvalidated scene contents, e.g. straight out of a file.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParts {
    pub scene_id: String,
    pub width: usize,
    pub height: usize,
    pub cell_size_m: f64,
    pub occupancy: Vec<Tile>,
    pub instances: Vec<ObjectInstance>,
    pub spawn_cells: Vec<Cell>,
    pub texture_seed: u64,
}

impl Scene {
    pub fn new(parts: SceneParts, tax: &Taxonomy) -> Result<Scene, SceneError> {
        let SceneParts {
            scene_id,
            width,
            height,
            cell_size_m,
            occupancy,
            instances,
            spawn_cells,
            texture_seed,
        } = parts;
        if width == 0 || height == 0 {
            return Err(SceneError::EmptyGrid);
        }
        if !(cell_size_m.is_finite() && cell_size_m > 0.0) {
            return Err(SceneError::BadCellSize);
        }
        if occupancy.len() != width * height {
            return Err(SceneError::OccupancyLength {
                got: occupancy.len(),
                expected: width * height,
            });
        }
        let inside = |c: Cell| c.x >= 0 && c.y >= 0 && (c.x as usize) < width && (c.y as usize) < height;
        let idx = |c: Cell| c.y as usize * width + c.x as usize;
        let mut content: Vec<CellContent> = occupancy
            .iter()
            .map(|t| match t {
                Tile::Free => CellContent::Free,
                Tile::Wall => CellContent::Wall,
            })
            .collect();
        let mut seen_ids = std::collections::HashSet::new();
        for (k, inst) in instances.iter().enumerate() {
            if !seen_ids.insert(inst.instance_id) {
                return Err(SceneError::DuplicateInstanceId(inst.instance_id));
            }
            if inst.footprint.is_empty() {
                return Err(SceneError::EmptyFootprint(inst.instance_id));
            }
            if inst.fine_id >= tax.num_fine() {
                return Err(SceneError::UnknownFine {
                    id: inst.instance_id,
                    fine: inst.fine_id,
                });
            }
            for &cell in &inst.footprint {
                if !inside(cell) {
                    return Err(SceneError::FootprintOutOfBounds {
                        id: inst.instance_id,
                        cell,
                    });
                }
                match content[idx(cell)] {
                    CellContent::Wall => {
                        return Err(SceneError::FootprintOnWall {
                            id: inst.instance_id,
                            cell,
                        })
                    }
                    CellContent::Object(other) => {
                        return Err(SceneError::OverlappingFootprints {
                            first: instances[other].instance_id,
                            second: inst.instance_id,
                            cell,
                        })
                    }
                    CellContent::Free => content[idx(cell)] = CellContent::Object(k),
                }
            }
        }
        if spawn_cells.is_empty() {
            return Err(SceneError::NoSpawns);
        }
        for &cell in &spawn_cells {
            if !inside(cell) {
                return Err(SceneError::SpawnOutOfBounds(cell));
            }
            match content[idx(cell)] {
                CellContent::Wall => return Err(SceneError::SpawnOnWall(cell)),
                CellContent::Object(k) => {
                    return Err(SceneError::SpawnOnFootprint {
                        cell,
                        id: instances[k].instance_id,
                    })
                }
                CellContent::Free => {}
            }
        }
        let scene = Scene {
            scene_id,
            width,
            height,
            cell_size_m,
            occupancy,
            instances,
            spawn_cells,
            texture_seed,
            content,
        };
        let reach = scene.flood_from(scene.spawn_cells[0]);
        for &cell in &scene.spawn_cells {
            if !reach[scene.index(cell)] {
                return Err(SceneError::SpawnDisconnected(cell));
            }
        }
        Ok(scene)
    }

    pub fn into_parts(self) -> SceneParts {
        SceneParts {
            scene_id: self.scene_id,
            width: self.width,
            height: self.height,
            cell_size_m: self.cell_size_m,
            occupancy: self.occupancy,
            instances: self.instances,
            spawn_cells: self.spawn_cells,
            texture_seed: self.texture_seed,
        }
    }

    pub fn scene_id(&self) -> &str {
        &self.scene_id
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cell_size_m(&self) -> f64 {
        self.cell_size_m
    }

    pub fn instances(&self) -> &[ObjectInstance] {
        &self.instances
    }

    pub fn spawn_cells(&self) -> &[Cell] {
        &self.spawn_cells
    }

    pub fn texture_seed(&self) -> u64 {
        self.texture_seed
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && (c.x as usize) < self.width && (c.y as usize) < self.height
    }

    /// Row-major index of an in-bounds cell.
    pub fn index(&self, c: Cell) -> usize {
        c.y as usize * self.width + c.x as usize
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        Cell::new((index % self.width) as i32, (index / self.width) as i32)
    }

    /// Content of a cell; out-of-bounds cells read as walls.
    pub fn content(&self, c: Cell) -> CellContent {
        if self.in_bounds(c) {
            self.content[self.index(c)]
        } else {
            CellContent::Wall
        }
    }

    /// Free and not covered by any footprint.
    pub fn is_walkable(&self, c: Cell) -> bool {
        self.content(c) == CellContent::Free
    }

    pub fn tile(&self, c: Cell) -> Tile {
        if self.in_bounds(c) {
            self.occupancy[self.index(c)]
        } else {
            Tile::Wall
        }
    }

    /// Instance indices whose coarse category is `coarse`.
    pub fn instances_of(&self, tax: &Taxonomy, coarse: usize) -> Vec<usize> {
        self.instances
            .iter()
            .enumerate()
            .filter(|(_, i)| tax.fine_to_coarse(i.fine_id).ok() == Some(coarse))
            .map(|(k, _)| k)
            .collect()
    }

    /// Walkable cells reachable from `start` by 4-connected moves.
    pub fn flood_from(&self, start: Cell) -> Vec<bool> {
        let mut seen = vec![false; self.num_cells()];
        if !self.is_walkable(start) {
            return seen;
        }
        let mut queue = VecDeque::from([start]);
        seen[self.index(start)] = true;
        while let Some(c) = queue.pop_front() {
            for n in c.neighbors4() {
                if self.is_walkable(n) && !seen[self.index(n)] {
                    seen[self.index(n)] = true;
                    queue.push_back(n);
                }
            }
        }
        seen
    }

    pub fn with_instance_colors(&self, colors: impl Fn(&ObjectInstance) -> [u8; 3]) -> Scene {
        let mut out = self.clone();
        for inst in &mut out.instances {
            inst.instance_color = colors(inst);
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct InstanceFile {
    id: u32,
    fine: usize,
    cells: Vec<Cell>,
    color: [u8; 3],
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    scene_id: String,
    width: usize,
    height: usize,
    cell_size_m: f64,
    occupancy: String,
    instances: Vec<InstanceFile>,
    spawns: Vec<Cell>,
    texture_seed: u64,
}

pub fn scene_to_json(scene: &Scene) -> String {
    let file = SceneFile {
        scene_id: scene.scene_id.clone(),
        width: scene.width,
        height: scene.height,
        cell_size_m: scene.cell_size_m,
        occupancy: scene
            .occupancy
            .iter()
            .map(|t| match t {
                Tile::Free => '.',
                Tile::Wall => '#',
            })
            .collect(),
        instances: scene
            .instances
            .iter()
            .map(|i| InstanceFile {
                id: i.instance_id,
                fine: i.fine_id,
                cells: i.footprint.clone(),
                color: i.instance_color,
            })
            .collect(),
        spawns: scene.spawn_cells.clone(),
        texture_seed: scene.texture_seed,
    };
    let mut s = serde_json::to_string(&file).expect("scene serializes");
    s.push('\n');
    s
}

pub fn scene_from_json(text: &str, tax: &Taxonomy) -> Result<Scene, SceneIoError> {
    let file: SceneFile = serde_json::from_str(text)?;
    let occupancy = file
        .occupancy
        .chars()
        .map(|c| match c {
            '.' => Ok(Tile::Free),
            '#' => Ok(Tile::Wall),
            other => Err(SceneError::OccupancyChar(other)),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let parts = SceneParts {
        scene_id: file.scene_id,
        width: file.width,
        height: file.height,
        cell_size_m: file.cell_size_m,
        occupancy,
        instances: file
            .instances
            .into_iter()
            .map(|i| ObjectInstance {
                instance_id: i.id,
                fine_id: i.fine,
                footprint: i.cells,
                instance_color: i.color,
            })
            .collect(),
        spawn_cells: file.spawns,
        texture_seed: file.texture_seed,
    };
    Ok(Scene::new(parts, tax)?)
}

pub fn parse_scene(path: impl AsRef<Path>, tax: &Taxonomy) -> Result<Scene, SceneIoError> {
    scene_from_json(&std::fs::read_to_string(path)?, tax)
}

pub fn serialize_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<(), SceneIoError> {
    std::fs::write(path, scene_to_json(scene))?;
    Ok(())
}

/// Load every `*.json` scene in a directory, sorted by file name.
pub fn load_scene_dir(dir: impl AsRef<Path>, tax: &Taxonomy) -> Result<Vec<Scene>, SceneIoError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| parse_scene(p, tax)).collect()
}

/// Redraw every instance color from a generator keyed by (seed, instance id).
/// Geometry and categories are untouched.
pub fn resample_instance_colors(scene: &Scene, seed: u64) -> Scene {
    scene.with_instance_colors(|inst| {
        let mut rng = seed::rng(seed, u64::from(inst.instance_id));
        [rng.gen(), rng.gen(), rng.gen()]
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub rooms: usize,
    pub objects_per_room: usize,
    /// Interior extent bounds (cells, excluding the outer wall).
    pub min_size: usize,
    pub max_size: usize,
    pub min_room: usize,
    pub door_width: usize,
    /// Place one instance of every goal category.
    pub require_goals: bool,
    /// Per-channel jitter of generated instance colors around the category
    /// palette color.
    pub color_jitter: u8,
    pub max_attempts: usize,
    pub cell_size_m: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            rooms: 4,
            objects_per_room: 3,
            min_size: 10,
            max_size: 14,
            min_room: 3,
            door_width: 2,
            require_goals: true,
            color_jitter: 24,
            max_attempts: 64,
            cell_size_m: DEFAULT_CELL_SIZE_M,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: i32,
    y0: i32,
    x1: i32,
    y1: i32,
}

impl Rect {
    fn w(&self) -> i32 {
        self.x1 - self.x0 + 1
    }
    fn h(&self) -> i32 {
        self.y1 - self.y0 + 1
    }
    fn contains(&self, c: Cell) -> bool {
        c.x >= self.x0 && c.x <= self.x1 && c.y >= self.y0 && c.y <= self.y1
    }
}

const SHAPES: [(i32, i32); 8] = [
    (1, 1),
    (2, 1),
    (1, 2),
    (2, 2),
    (3, 1),
    (1, 3),
    (4, 1),
    (1, 4),
];

struct Builder {
    width: usize,
    height: usize,
    occupancy: Vec<Tile>,
    blocked: Vec<bool>,
    no_place: Vec<bool>,
}

impl Builder {
    fn idx(&self, c: Cell) -> usize {
        c.y as usize * self.width + c.x as usize
    }

    fn inside(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && (c.x as usize) < self.width && (c.y as usize) < self.height
    }

    fn walkable(&self, c: Cell) -> bool {
        self.inside(c) && self.occupancy[self.idx(c)] == Tile::Free && !self.blocked[self.idx(c)]
    }

    fn connected(&self) -> bool {
        let free: Vec<Cell> = (0..self.width * self.height)
            .map(|i| Cell::new((i % self.width) as i32, (i / self.width) as i32))
            .filter(|&c| self.walkable(c))
            .collect();
        let Some(&start) = free.first() else {
            return false;
        };
        let mut seen = vec![false; self.width * self.height];
        seen[self.idx(start)] = true;
        let mut queue = VecDeque::from([start]);
        let mut count = 1;
        while let Some(c) = queue.pop_front() {
            for n in c.neighbors4() {
                if self.walkable(n) && !seen[self.idx(n)] {
                    seen[self.idx(n)] = true;
                    count += 1;
                    queue.push_back(n);
                }
            }
        }
        count == free.len()
    }
}

/// Generate a house: rooms from a recursive partition with door gaps, and
/// objects placed against walls. Pure in (seed, cfg, taxonomy).
pub fn generate_scene(seed: u64, cfg: &GenConfig, tax: &Taxonomy) -> Result<Scene, GenError> {
    if cfg.rooms == 0 {
        return Err(GenError::BadConfig("rooms must be at least 1".into()));
    }
    if cfg.min_size == 0 || cfg.max_size < cfg.min_size || cfg.min_room == 0 || cfg.door_width == 0 {
        return Err(GenError::BadConfig("size bounds must be positive and ordered".into()));
    }
    if !(cfg.cell_size_m.is_finite() && cfg.cell_size_m > 0.0) {
        return Err(GenError::BadConfig("cell size must be positive".into()));
    }
    let mut last = String::new();
    for attempt in 0..cfg.max_attempts.max(1) {
        let mut rng = seed::rng(seed, attempt as u64);
        match try_generate(&mut rng, seed, cfg, tax) {
            Ok(scene) => return Ok(scene),
            Err(reason) => last = reason,
        }
    }
    Err(GenError::Infeasible {
        attempts: cfg.max_attempts.max(1),
        reason: last,
    })
}

fn try_generate(
    rng: &mut impl Rng,
    seed: u64,
    cfg: &GenConfig,
    tax: &Taxonomy,
) -> Result<Scene, String> {
    let iw = rng.gen_range(cfg.min_size..=cfg.max_size) as i32;
    let ih = rng.gen_range(cfg.min_size..=cfg.max_size) as i32;
    let width = iw as usize + 2;
    let height = ih as usize + 2;
    let mut b = Builder {
        width,
        height,
        occupancy: vec![Tile::Free; width * height],
        blocked: vec![false; width * height],
        no_place: vec![false; width * height],
    };
    for y in 0..height as i32 {
        for x in 0..width as i32 {
            if x == 0 || y == 0 || x == width as i32 - 1 || y == height as i32 - 1 {
                let i = b.idx(Cell::new(x, y));
                b.occupancy[i] = Tile::Wall;
            }
        }
    }

    let min_room = cfg.min_room as i32;
    let mut rooms = vec![Rect {
        x0: 1,
        y0: 1,
        x1: iw,
        y1: ih,
    }];
    let mut doors: Vec<Cell> = Vec::new();
    while rooms.len() < cfg.rooms {
        let candidate = rooms
            .iter()
            .enumerate()
            .filter(|(_, r)| r.w().max(r.h()) > 2 * min_room)
            .max_by_key(|(k, r)| (r.w() * r.h(), std::cmp::Reverse(*k)))
            .map(|(k, _)| k);
        let Some(k) = candidate else {
            return Err(format!("cannot partition into {} rooms", cfg.rooms));
        };
        let r = rooms.remove(k);
        let vertical = r.w() >= r.h();
        let (lo, hi) = if vertical { (r.x0, r.x1) } else { (r.y0, r.y1) };
        // positions whose wall line does not touch an existing door gap
        let options: Vec<i32> = (lo + min_room..=hi - min_room)
            .filter(|&s| {
                let ends = if vertical {
                    [Cell::new(s, r.y0 - 1), Cell::new(s, r.y1 + 1)]
                } else {
                    [Cell::new(r.x0 - 1, s), Cell::new(r.x1 + 1, s)]
                };
                !ends.iter().any(|e| doors.contains(e))
            })
            .collect();
        let Some(&s) = options.choose(rng) else {
            return Err("no split position avoids existing doors".into());
        };
        let line: Vec<Cell> = if vertical {
            (r.y0..=r.y1).map(|y| Cell::new(s, y)).collect()
        } else {
            (r.x0..=r.x1).map(|x| Cell::new(x, s)).collect()
        };
        for &c in &line {
            let i = b.idx(c);
            b.occupancy[i] = Tile::Wall;
        }
        let door_w = (cfg.door_width as i32).min(line.len() as i32);
        let start = rng.gen_range(0..=(line.len() as i32 - door_w)) as usize;
        for &c in &line[start..start + door_w as usize] {
            let i = b.idx(c);
            b.occupancy[i] = Tile::Free;
            doors.push(c);
        }
        let (a, bb) = if vertical {
            (
                Rect { x1: s - 1, ..r },
                Rect { x0: s + 1, ..r },
            )
        } else {
            (
                Rect { y1: s - 1, ..r },
                Rect { y0: s + 1, ..r },
            )
        };
        rooms.push(a);
        rooms.push(bb);
    }
    for &d in &doors {
        for c in std::iter::once(d).chain(d.neighbors4()) {
            if b.inside(c) {
                let i = b.idx(c);
                b.no_place[i] = true;
            }
        }
    }

    // object category list: goals first, then random fill
    let mut wanted: Vec<(usize, bool)> = Vec::new();
    if cfg.require_goals {
        for &g in tax.goal_categories() {
            let fines = tax.fine_ids_of_coarse(g);
            let fine = *fines.choose(rng).ok_or("goal category without fine labels")?;
            wanted.push((fine, true));
        }
    }
    let total = (cfg.rooms * cfg.objects_per_room).max(wanted.len());
    let pool = tax.object_fine_ids();
    while wanted.len() < total {
        wanted.push((*pool.choose(rng).ok_or("no object categories")?, false));
    }
    let mut room_order: Vec<usize> = (0..rooms.len()).collect();
    room_order.shuffle(rng);

    let mut instances: Vec<ObjectInstance> = Vec::new();
    for (n, (fine, required)) in wanted.into_iter().enumerate() {
        let room = rooms[room_order[n % rooms.len()]];
        let placed = place_object(&mut b, rng, room);
        match placed {
            Some(footprint) => {
                let id = instances.len() as u32 + 1;
                instances.push(ObjectInstance {
                    instance_id: id,
                    fine_id: fine,
                    footprint,
                    instance_color: [0, 0, 0],
                });
            }
            None if required => return Err("could not place a goal instance".into()),
            None => {}
        }
    }

    let texture_seed = seed::derive(seed, 0x7e87);
    for inst in &mut instances {
        let base = tax.palette()[tax.fine_to_coarse(inst.fine_id).map_err(|e| e.to_string())?];
        let mut crng = seed::rng(texture_seed, u64::from(inst.instance_id));
        let j = i32::from(cfg.color_jitter);
        for (out, &b) in inst.instance_color.iter_mut().zip(&base) {
            let delta = if j > 0 { crng.gen_range(-j..=j) } else { 0 };
            *out = (i32::from(b) + delta).clamp(0, 255) as u8;
        }
    }

    let spawn_cells: Vec<Cell> = (0..width * height)
        .map(|i| Cell::new((i % width) as i32, (i / width) as i32))
        .filter(|&c| b.walkable(c))
        .collect();
    let parts = SceneParts {
        scene_id: format!("scene-{seed}"),
        width,
        height,
        cell_size_m: cfg.cell_size_m,
        occupancy: b.occupancy,
        instances,
        spawn_cells,
        texture_seed,
    };
    Scene::new(parts, tax).map_err(|e| e.to_string())
}

fn place_object(b: &mut Builder, rng: &mut impl Rng, room: Rect) -> Option<Vec<Cell>> {
    for _ in 0..60 {
        let (sw, sh) = *SHAPES.choose(rng)?;
        if sw > room.w() || sh > room.h() {
            continue;
        }
        // anchor the footprint on one of the four room walls
        let side = rng.gen_range(0..4);
        let (x0, y0) = match side {
            0 => (room.x0, rng.gen_range(room.y0..=room.y1 - sh + 1)),
            1 => (room.x1 - sw + 1, rng.gen_range(room.y0..=room.y1 - sh + 1)),
            2 => (rng.gen_range(room.x0..=room.x1 - sw + 1), room.y0),
            _ => (rng.gen_range(room.x0..=room.x1 - sw + 1), room.y1 - sh + 1),
        };
        let cells: Vec<Cell> = (0..sh)
            .flat_map(|dy| (0..sw).map(move |dx| Cell::new(x0 + dx, y0 + dy)))
            .collect();
        let ok = cells.iter().all(|&c| {
            room.contains(c) && b.walkable(c) && !b.no_place[b.idx(c)]
                // keep a one-cell gap to other objects
                && c.neighbors4().iter().all(|&n| !b.inside(n) || !b.blocked[b.idx(n)])
        });
        if !ok {
            continue;
        }
        for &c in &cells {
            let i = b.idx(c);
            b.blocked[i] = true;
        }
        if b.connected() {
            return Some(cells);
        }
        for &c in &cells {
            let i = b.idx(c);
            b.blocked[i] = false;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn open_room(w: usize, h: usize) -> SceneParts {
        let mut occupancy = vec![Tile::Free; w * h];
        for y in 0..h {
            for x in 0..w {
                if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                    occupancy[y * w + x] = Tile::Wall;
                }
            }
        }
        SceneParts {
            scene_id: "room".into(),
            width: w,
            height: h,
            cell_size_m: DEFAULT_CELL_SIZE_M,
            occupancy,
            instances: vec![],
            spawn_cells: vec![Cell::new(1, 1)],
            texture_seed: 0,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let tax = Taxonomy::desk_default();
        let cfg = GenConfig::default();
        let a = generate_scene(1, &cfg, &tax).unwrap();
        let b = generate_scene(1, &cfg, &tax).unwrap();
        assert_eq!(scene_to_json(&a), scene_to_json(&b));
        let c = generate_scene(2, &cfg, &tax).unwrap();
        assert_ne!(scene_to_json(&a), scene_to_json(&c));
    }

    #[test]
    fn degenerate_single_room() {
        let tax = Taxonomy::desk_default();
        let cfg = GenConfig {
            rooms: 1,
            objects_per_room: 0,
            require_goals: false,
            ..GenConfig::default()
        };
        let s = generate_scene(3, &cfg, &tax).unwrap();
        assert!(s.instances().is_empty());
        let interior = (s.width() - 2) * (s.height() - 2);
        assert_eq!(s.spawn_cells().len(), interior);
        for y in 1..s.height() as i32 - 1 {
            for x in 1..s.width() as i32 - 1 {
                assert_eq!(s.tile(Cell::new(x, y)), Tile::Free);
            }
        }
    }

    #[test]
    fn bad_configs_rejected() {
        let tax = Taxonomy::desk_default();
        let cfg = GenConfig {
            rooms: 0,
            ..GenConfig::default()
        };
        assert!(matches!(generate_scene(0, &cfg, &tax), Err(GenError::BadConfig(_))));
        let crowded = GenConfig {
            rooms: 1,
            objects_per_room: 400,
            min_size: 3,
            max_size: 3,
            max_attempts: 3,
            ..GenConfig::default()
        };
        assert!(matches!(
            generate_scene(0, &crowded, &tax),
            Err(GenError::Infeasible { attempts: 3, .. })
        ));
    }

    #[test]
    fn overlapping_footprints_rejected() {
        let tax = Taxonomy::desk_default();
        let mut parts = open_room(6, 6);
        parts.instances = vec![
            ObjectInstance {
                instance_id: 1,
                fine_id: 3,
                footprint: vec![Cell::new(3, 3), Cell::new(4, 3)],
                instance_color: [1, 2, 3],
            },
            ObjectInstance {
                instance_id: 2,
                fine_id: 4,
                footprint: vec![Cell::new(4, 3)],
                instance_color: [1, 2, 3],
            },
        ];
        assert_eq!(
            Scene::new(parts, &tax).unwrap_err(),
            SceneError::OverlappingFootprints {
                first: 1,
                second: 2,
                cell: Cell::new(4, 3)
            }
        );
    }

    #[test]
    fn spawn_on_wall_rejected() {
        let tax = Taxonomy::desk_default();
        let mut parts = open_room(6, 6);
        parts.spawn_cells = vec![Cell::new(0, 2)];
        assert_eq!(
            Scene::new(parts, &tax).unwrap_err(),
            SceneError::SpawnOnWall(Cell::new(0, 2))
        );
    }

    #[test]
    fn overlapping_file_names_invariant() {
        let tax = Taxonomy::desk_default();
        let occupancy = "#####..##..#";
        let text = format!(
            r#"{{"scene_id":"x","width":4,"height":3,"cell_size_m":0.25,"occupancy":"{occupancy}",
            "instances":[{{"id":1,"fine":3,"cells":[[1,1]],"color":[1,1,1]}},
                         {{"id":2,"fine":3,"cells":[[1,1]],"color":[2,2,2]}}],
            "spawns":[[2,1]],"texture_seed":0}}"#
        );
        let err = scene_from_json(&text, &tax).unwrap_err();
        assert!(err.to_string().contains("overlap"), "{err}");
        assert!(matches!(
            scene_from_json("{\"scene_id\": 3}", &tax),
            Err(SceneIoError::Schema(_))
        ));
    }

    #[test]
    fn file_round_trip() {
        let tax = Taxonomy::desk_default();
        let s = generate_scene(11, &GenConfig::default(), &tax).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        serialize_scene(&s, &path).unwrap();
        assert_eq!(parse_scene(&path, &tax).unwrap(), s);
    }

    #[test]
    fn resample_keeps_geometry() {
        let tax = Taxonomy::desk_default();
        let s = generate_scene(5, &GenConfig::default(), &tax).unwrap();
        let r1 = resample_instance_colors(&s, 7);
        let r2 = resample_instance_colors(&s, 7);
        assert_eq!(r1, r2);
        assert_eq!(r1.instances().len(), s.instances().len());
        for (a, b) in s.instances().iter().zip(r1.instances()) {
            assert_eq!((a.instance_id, a.fine_id, &a.footprint), (b.instance_id, b.fine_id, &b.footprint));
        }
        assert_eq!(r1.spawn_cells(), s.spawn_cells());
        assert_eq!(r1.texture_seed(), s.texture_seed());
    }
}

//! Procedurally generated gridworlds.
//!
//! Four task families share one action set and one observation layout, but
//! every family encodes its cell kinds in its own channel range, so
//! observations from different families can never coincide.

use std::collections::VecDeque;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of the egocentric observation window.
pub const VIEW: usize = 5;
pub const NUM_ACTIONS: usize = 4;
pub const DEFAULT_SIZE: usize = 15;
pub const DEFAULT_CUTOFF: usize = 100;
const MAX_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    OpenRoom,
    KeyDoor,
    Crossing,
    HazardCrossing,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::OpenRoom,
        TaskKind::KeyDoor,
        TaskKind::Crossing,
        TaskKind::HazardCrossing,
    ];

    pub fn index(self) -> usize {
        match self {
            TaskKind::OpenRoom => 0,
            TaskKind::KeyDoor => 1,
            TaskKind::Crossing => 2,
            TaskKind::HazardCrossing => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::OpenRoom => "OpenRoom",
            TaskKind::KeyDoor => "KeyDoor",
            TaskKind::Crossing => "Crossing",
            TaskKind::HazardCrossing => "HazardCrossing",
        }
    }

    /// Non-floor cell kinds that can appear in this family, in channel order.
    pub fn palette(self) -> &'static [Cell] {
        match self {
            TaskKind::OpenRoom => &[Cell::Wall, Cell::Goal],
            TaskKind::Crossing => &[Cell::Wall, Cell::Goal],
            TaskKind::HazardCrossing => &[Cell::Wall, Cell::Hazard, Cell::Goal],
            TaskKind::KeyDoor => &[Cell::Wall, Cell::Key, Cell::Door, Cell::Goal],
        }
    }

    /// First channel of this family inside a cell's channel block.
    fn channel_offset(self) -> usize {
        match self {
            TaskKind::OpenRoom => 0,
            TaskKind::Crossing => 2,
            TaskKind::HazardCrossing => 4,
            TaskKind::KeyDoor => 7,
        }
    }

    fn salt(self) -> u64 {
        0x9e37_79b9_7f4a_7c15u64.wrapping_mul(self.index() as u64 + 1)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cell {
    Wall,
    Floor,
    Hazard,
    Key,
    Door,
    Goal,
}

impl Cell {
    pub fn to_char(self) -> char {
        match self {
            Cell::Wall => '#',
            Cell::Floor => '.',
            Cell::Hazard => '~',
            Cell::Key => 'k',
            Cell::Door => 'D',
            Cell::Goal => 'G',
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Cell::Wall => 0,
            Cell::Floor => 1,
            Cell::Hazard => 2,
            Cell::Key => 3,
            Cell::Door => 4,
            Cell::Goal => 5,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Cell> {
        Some(match code {
            0 => Cell::Wall,
            1 => Cell::Floor,
            2 => Cell::Hazard,
            3 => Cell::Key,
            4 => Cell::Door,
            5 => Cell::Goal,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Heading {
    East,
    South,
    West,
    North,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::East, Heading::South, Heading::West, Heading::North];

    pub fn index(self) -> usize {
        match self {
            Heading::East => 0,
            Heading::South => 1,
            Heading::West => 2,
            Heading::North => 3,
        }
    }

    pub fn from_index(i: usize) -> Heading {
        Heading::ALL[i % 4]
    }

    pub fn right(self) -> Heading {
        Heading::from_index(self.index() + 1)
    }

    pub fn left(self) -> Heading {
        Heading::from_index(self.index() + 3)
    }

    /// Unit step `(dx, dy)`; y grows downwards.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Heading::East => (1, 0),
            Heading::South => (0, 1),
            Heading::West => (-1, 0),
            Heading::North => (0, -1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    TurnLeft,
    TurnRight,
    Forward,
    Interact,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [Action::TurnLeft, Action::TurnRight, Action::Forward, Action::Interact];

    pub fn id(self) -> usize {
        self as usize
    }
}

impl TryFrom<usize> for Action {
    type Error = Error;

    fn try_from(id: usize) -> Result<Self> {
        Action::ALL.get(id).copied().ok_or(Error::InvalidAction(id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pos {
    pub x: usize,
    pub y: usize,
}

impl Pos {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    fn offset(self, dx: isize, dy: isize) -> Option<Pos> {
        let x = self.x as isize + dx;
        let y = self.y as isize + dy;
        (x >= 0 && y >= 0).then(|| Pos::new(x as usize, y as usize))
    }
}

/// Family, size and seed: everything needed to regenerate a layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    #[serde(default = "default_size")]
    pub size: usize,
    pub seed: u64,
}

fn default_size() -> usize {
    DEFAULT_SIZE
}

impl TaskSpec {
    pub fn new(kind: TaskKind, size: usize, seed: u64) -> Self {
        Self { kind, size, seed }
    }

    pub fn generate(&self) -> Result<GridTask> {
        generate_task_sized(self.kind, self.size, self.seed)
    }

    /// Layout for the `episode`-th procedurally generated instance.
    pub fn instance(&self, episode: u64) -> Result<GridTask> {
        generate_task_sized(self.kind, self.size, mix_seed(self.seed, episode))
    }
}

/// A single generated level. The `task_tag` is bookkeeping for evaluation and
/// never reaches the learner; observations are built from the view alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridTask {
    kind: TaskKind,
    width: usize,
    height: usize,
    layout: Vec<Cell>,
    start: Pos,
    start_heading: Heading,
    goal: Pos,
    key: Option<Pos>,
    door: Option<Pos>,
    task_tag: u64,
    seed: u64,
}

impl GridTask {
    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn start(&self) -> (Pos, Heading) {
        (self.start, self.start_heading)
    }

    pub fn goal(&self) -> Pos {
        self.goal
    }

    pub fn key(&self) -> Option<Pos> {
        self.key
    }

    pub fn door(&self) -> Option<Pos> {
        self.door
    }

    pub fn cell(&self, p: Pos) -> Cell {
        self.layout[p.y * self.width + p.x]
    }

    pub fn layout(&self) -> &[Cell] {
        &self.layout
    }

    /// Evaluation bookkeeping only.
    pub fn task_tag(&self) -> u64 {
        self.task_tag
    }

    pub fn with_tag(mut self, tag: u64) -> Self {
        self.task_tag = tag;
        self
    }

    /// One character per cell, rows separated by newlines.
    pub fn render(&self) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = Pos::new(x, y);
                let c = if p == self.start { '@' } else { self.cell(p).to_char() };
                out.push(c);
            }
            out.push('\n');
        }
        out
    }
}

/// splitmix64 finaliser over `(seed, salt)`.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0xbf58_476d_1ce4_e5b9).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn generate_task(kind: TaskKind, seed: u64) -> Result<GridTask> {
    generate_task_sized(kind, DEFAULT_SIZE, seed)
}

pub fn generate_task_sized(kind: TaskKind, size: usize, seed: u64) -> Result<GridTask> {
    let min = match kind {
        TaskKind::OpenRoom => 4,
        _ => 7,
    };
    if size < min {
        return Err(Error::Config(format!("{kind} needs size >= {min}, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ kind.salt());
    for _ in 0..MAX_ATTEMPTS {
        let task = match kind {
            TaskKind::OpenRoom => layout_open_room(size, seed, &mut rng),
            TaskKind::Crossing => layout_crossing(size, seed, Cell::Wall, &mut rng),
            TaskKind::HazardCrossing => layout_crossing(size, seed, Cell::Hazard, &mut rng),
            TaskKind::KeyDoor => layout_key_door(size, seed, &mut rng),
        };
        if is_solvable(&task) {
            return Ok(task);
        }
    }
    Err(Error::Unsolvable {
        kind: kind.name(),
        seed,
        attempts: MAX_ATTEMPTS,
    })
}

fn bordered(size: usize) -> Vec<Cell> {
    let mut layout = vec![Cell::Floor; size * size];
    for i in 0..size {
        layout[i] = Cell::Wall;
        layout[(size - 1) * size + i] = Cell::Wall;
        layout[i * size] = Cell::Wall;
        layout[i * size + size - 1] = Cell::Wall;
    }
    layout
}

fn random_heading(rng: &mut ChaCha8Rng) -> Heading {
    Heading::from_index(rng.gen_range(0..4))
}

fn layout_open_room(size: usize, seed: u64, rng: &mut ChaCha8Rng) -> GridTask {
    let mut layout = bordered(size);
    let mut interior: Vec<Pos> = (1..size - 1)
        .flat_map(|y| (1..size - 1).map(move |x| Pos::new(x, y)))
        .collect();
    interior.shuffle(rng);
    let start = interior[0];
    let goal = interior[1];
    layout[goal.y * size + goal.x] = Cell::Goal;
    GridTask {
        kind: TaskKind::OpenRoom,
        width: size,
        height: size,
        layout,
        start,
        start_heading: random_heading(rng),
        goal,
        key: None,
        door: None,
        task_tag: 0,
        seed,
    }
}

/// Full-length barriers of `barrier` cells, each with a single opening;
/// start in the top-left corner, goal in the bottom-right one.
fn layout_crossing(size: usize, seed: u64, barrier: Cell, rng: &mut ChaCha8Rng) -> GridTask {
    let mut layout = bordered(size);
    let lines = ((size - 3) / 6).max(1);
    // candidate line coordinates keep the corners free
    let mut slots: Vec<usize> = (2..size - 2).step_by(2).collect();
    slots.shuffle(rng);
    let mut placed = 0;
    for &c in slots.iter() {
        if placed == lines {
            break;
        }
        let vertical = rng.gen_bool(0.5);
        let gap = rng.gen_range(1..size - 1);
        for i in 1..size - 1 {
            if i == gap {
                continue;
            }
            let (x, y) = if vertical { (c, i) } else { (i, c) };
            layout[y * size + x] = barrier;
        }
        placed += 1;
    }
    let start = Pos::new(1, 1);
    let goal = Pos::new(size - 2, size - 2);
    layout[start.y * size + start.x] = Cell::Floor;
    layout[goal.y * size + goal.x] = Cell::Goal;
    GridTask {
        kind: if barrier == Cell::Hazard {
            TaskKind::HazardCrossing
        } else {
            TaskKind::Crossing
        },
        width: size,
        height: size,
        layout,
        start,
        start_heading: random_heading(rng),
        goal,
        key: None,
        door: None,
        task_tag: 0,
        seed,
    }
}

fn layout_key_door(size: usize, seed: u64, rng: &mut ChaCha8Rng) -> GridTask {
    let mut layout = bordered(size);
    let wall_x = rng.gen_range(3..size - 3);
    for y in 1..size - 1 {
        layout[y * size + wall_x] = Cell::Wall;
    }
    let door = Pos::new(wall_x, rng.gen_range(1..size - 1));
    layout[door.y * size + door.x] = Cell::Door;
    let mut left: Vec<Pos> = (1..size - 1)
        .flat_map(|y| (1..wall_x).map(move |x| Pos::new(x, y)))
        .collect();
    left.shuffle(rng);
    let start = left[0];
    let key = left[1];
    layout[key.y * size + key.x] = Cell::Key;
    let goal = Pos::new(rng.gen_range(wall_x + 1..size - 1), rng.gen_range(1..size - 1));
    layout[goal.y * size + goal.x] = Cell::Goal;
    GridTask {
        kind: TaskKind::KeyDoor,
        width: size,
        height: size,
        layout,
        start,
        start_heading: random_heading(rng),
        goal,
        key: Some(key),
        door: Some(door),
        task_tag: 0,
        seed,
    }
}

/// Four-connected flood fill from `from` over cells accepted by `passable`.
pub fn flood_fill(task: &GridTask, from: Pos, passable: impl Fn(Pos, Cell) -> bool) -> Vec<bool> {
    let mut seen = vec![false; task.width * task.height];
    let mut queue = VecDeque::from([from]);
    seen[from.y * task.width + from.x] = true;
    while let Some(p) = queue.pop_front() {
        for h in Heading::ALL {
            let (dx, dy) = h.delta();
            let Some(q) = p.offset(dx, dy) else { continue };
            if q.x >= task.width || q.y >= task.height {
                continue;
            }
            let idx = q.y * task.width + q.x;
            if !seen[idx] && passable(q, task.layout[idx]) {
                seen[idx] = true;
                queue.push_back(q);
            }
        }
    }
    seen
}

fn neighbours(task: &GridTask, p: Pos) -> impl Iterator<Item = Pos> + '_ {
    Heading::ALL.into_iter().filter_map(move |h| {
        let (dx, dy) = h.delta();
        p.offset(dx, dy).filter(|q| q.x < task.width && q.y < task.height)
    })
}

/// True if the goal can be reached without touching a hazard, including
/// fetching the key and opening the door where the family needs it.
pub fn is_solvable(task: &GridTask) -> bool {
    let w = task.width;
    let distinct = task.start != task.goal && task.key.map_or(true, |k| k != task.start && k != task.goal);
    if !distinct || task.cell(task.start) != Cell::Floor {
        return false;
    }
    match task.kind {
        TaskKind::KeyDoor => {
            let (Some(key), Some(door)) = (task.key, task.door) else {
                return false;
            };
            let before_key = flood_fill(task, task.start, |_, c| c == Cell::Floor);
            let key_reachable = neighbours(task, key).any(|n| before_key[n.y * w + n.x]);
            let after_key = flood_fill(task, task.start, |_, c| matches!(c, Cell::Floor | Cell::Key));
            let door_reachable = neighbours(task, door).any(|n| after_key[n.y * w + n.x]);
            let opened = flood_fill(task, task.start, |_, c| {
                matches!(c, Cell::Floor | Cell::Key | Cell::Door | Cell::Goal)
            });
            key_reachable && door_reachable && opened[task.goal.y * w + task.goal.x]
        }
        _ => {
            let reach = flood_fill(task, task.start, |_, c| matches!(c, Cell::Floor | Cell::Goal));
            reach[task.goal.y * w + task.goal.x]
        }
    }
}

/// What the agent sees: an egocentric `VIEW`×`VIEW` patch with the agent at the
/// bottom-centre looking up, its absolute heading, and whether it holds a key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub kind: TaskKind,
    pub window: [Cell; VIEW * VIEW],
    pub heading: Heading,
    pub carrying: bool,
}

const CHANNELS_PER_CELL: usize = 11;
const WINDOW_FEATURES: usize = VIEW * VIEW * CHANNELS_PER_CELL;
const KIND_BLOCK: usize = WINDOW_FEATURES;
const HEADING_BLOCK: usize = KIND_BLOCK + 4;
const CARRY_FEATURE: usize = HEADING_BLOCK + 4;
/// Length of [`Observation::features`].
pub const FEATURE_DIM: usize = CARRY_FEATURE + 1;

impl Observation {
    pub fn features(&self) -> Vec<f64> {
        let mut out = vec![0.0; FEATURE_DIM];
        self.write_features(&mut out);
        out
    }

    pub fn write_features(&self, out: &mut [f64]) {
        out[..FEATURE_DIM].fill(0.0);
        let palette = self.kind.palette();
        let offset = self.kind.channel_offset();
        for (i, cell) in self.window.iter().enumerate() {
            if *cell == Cell::Floor {
                continue;
            }
            let channel = palette
                .iter()
                .position(|c| c == cell)
                .expect("cell kind outside the family palette");
            out[i * CHANNELS_PER_CELL + offset + channel] = 1.0;
        }
        out[KIND_BLOCK + self.kind.index()] = 1.0;
        out[HEADING_BLOCK + self.heading.index()] = 1.0;
        if self.carrying {
            out[CARRY_FEATURE] = 1.0;
        }
    }

    /// Slice of a feature vector holding the family block.
    pub fn kind_block(features: &[f64]) -> &[f64] {
        &features[KIND_BLOCK..KIND_BLOCK + 4]
    }

    /// Channel range `[start, end)` of a window cell; used by tests.
    pub fn cell_channels(cell_index: usize) -> std::ops::Range<usize> {
        cell_index * CHANNELS_PER_CELL..(cell_index + 1) * CHANNELS_PER_CELL
    }
}

/// One environment step as stored in replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Observation,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
    pub truncated: bool,
    pub next_obs: Observation,
}

impl Transition {
    /// Episode ended because of the task, not because of the cutoff.
    pub fn terminal(&self) -> bool {
        self.done && !self.truncated
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    /// Ended by the step cutoff rather than by reaching goal or hazard.
    pub truncated: bool,
}

/// Mutable episode state over an immutable [`GridTask`].
#[derive(Debug, Clone)]
pub struct GridEnv {
    task: GridTask,
    cells: Vec<Cell>,
    pos: Pos,
    heading: Heading,
    carrying: bool,
    steps: usize,
    done: bool,
    cutoff: usize,
    step_penalty: f64,
}

impl GridEnv {
    pub fn new(task: GridTask, cutoff: usize) -> Self {
        let (pos, heading) = task.start();
        Self {
            cells: task.layout.clone(),
            task,
            pos,
            heading,
            carrying: false,
            steps: 0,
            done: false,
            cutoff,
            step_penalty: 0.0,
        }
    }

    /// Goal reward becomes `1 - penalty * steps` instead of `1`.
    pub fn with_step_penalty(mut self, penalty: f64) -> Self {
        self.step_penalty = penalty;
        self
    }

    pub fn task(&self) -> &GridTask {
        &self.task
    }

    pub fn position(&self) -> Pos {
        self.pos
    }

    pub fn heading(&self) -> Heading {
        self.heading
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn reset(&mut self) -> Observation {
        let (pos, heading) = self.task.start();
        self.cells.copy_from_slice(&self.task.layout);
        self.pos = pos;
        self.heading = heading;
        self.carrying = false;
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    fn cell_at(&self, x: isize, y: isize) -> Cell {
        if x < 0 || y < 0 || x as usize >= self.task.width || y as usize >= self.task.height {
            return Cell::Wall;
        }
        self.cells[y as usize * self.task.width + x as usize]
    }

    pub fn observe(&self) -> Observation {
        let mut window = [Cell::Wall; VIEW * VIEW];
        let (fx, fy) = self.heading.delta();
        let (rx, ry) = self.heading.right().delta();
        let half = (VIEW / 2) as isize;
        for row in 0..VIEW {
            let ahead = (VIEW - 1 - row) as isize;
            for col in 0..VIEW {
                let lateral = col as isize - half;
                let x = self.pos.x as isize + ahead * fx + lateral * rx;
                let y = self.pos.y as isize + ahead * fy + lateral * ry;
                window[row * VIEW + col] = self.cell_at(x, y);
            }
        }
        Observation {
            kind: self.task.kind,
            window,
            heading: self.heading,
            carrying: self.carrying,
        }
    }

    pub fn step(&mut self, action: usize) -> Result<StepOutcome> {
        let action = Action::try_from(action)?;
        if self.done {
            return Err(Error::EpisodeDone);
        }
        self.steps += 1;
        let mut reward = 0.0;
        let mut terminal = false;
        let (dx, dy) = self.heading.delta();
        let ahead_x = self.pos.x as isize + dx;
        let ahead_y = self.pos.y as isize + dy;
        let ahead = self.cell_at(ahead_x, ahead_y);
        match action {
            Action::TurnLeft => self.heading = self.heading.left(),
            Action::TurnRight => self.heading = self.heading.right(),
            Action::Forward => match ahead {
                Cell::Floor => self.pos = Pos::new(ahead_x as usize, ahead_y as usize),
                Cell::Goal => {
                    self.pos = Pos::new(ahead_x as usize, ahead_y as usize);
                    reward = (1.0 - self.step_penalty * self.steps as f64).max(0.0);
                    terminal = true;
                }
                Cell::Hazard => {
                    self.pos = Pos::new(ahead_x as usize, ahead_y as usize);
                    reward = -1.0;
                    terminal = true;
                }
                Cell::Wall | Cell::Key | Cell::Door => {}
            },
            Action::Interact => {
                let idx = ahead_y as usize * self.task.width + ahead_x as usize;
                match ahead {
                    Cell::Key if !self.carrying => {
                        self.cells[idx] = Cell::Floor;
                        self.carrying = true;
                    }
                    Cell::Door if self.carrying => self.cells[idx] = Cell::Floor,
                    _ => {}
                }
            }
        }
        let truncated = !terminal && self.steps >= self.cutoff;
        self.done = terminal || truncated;
        Ok(StepOutcome {
            obs: self.observe(),
            reward,
            done: self.done,
            truncated,
        })
    }

    /// Layout with the agent drawn as an arrow.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for y in 0..self.task.height {
            for x in 0..self.task.width {
                if self.pos == Pos::new(x, y) {
                    out.push(match self.heading {
                        Heading::East => '>',
                        Heading::South => 'v',
                        Heading::West => '<',
                        Heading::North => '^',
                    });
                } else {
                    out.push(self.cells[y * self.task.width + x].to_char());
                }
            }
            out.push('\n');
        }
        out
    }
}

/// One schedule entry as written in a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub kind: TaskKind,
    #[serde(default = "default_size")]
    pub size: usize,
    pub seed: u64,
    pub budget: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub tasks: Vec<TaskEntry>,
    #[serde(default = "default_cutoff")]
    pub cutoff: usize,
    /// Regenerate the layout for every episode (otherwise the seed's layout is reused).
    #[serde(default = "default_true")]
    pub procedural: bool,
    #[serde(default)]
    pub step_penalty: f64,
}

fn default_cutoff() -> usize {
    DEFAULT_CUTOFF
}

fn default_true() -> bool {
    true
}

impl ScheduleConfig {
    pub fn uniform(kinds: &[TaskKind], size: usize, budget: u64, seed: u64) -> Self {
        Self {
            tasks: kinds
                .iter()
                .enumerate()
                .map(|(i, &kind)| TaskEntry {
                    kind,
                    size,
                    // kept below 2^63 so configs survive TOML integers
                    seed: mix_seed(seed, i as u64) >> 1,
                    budget,
                })
                .collect(),
            cutoff: DEFAULT_CUTOFF,
            procedural: true,
            step_penalty: 0.0,
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.tasks.iter().map(|t| t.budget).sum()
    }
}

#[derive(Debug, Clone)]
pub struct ScheduledTask {
    pub spec: TaskSpec,
    pub budget: u64,
    pub tag: u64,
    procedural: bool,
    cutoff: usize,
    step_penalty: f64,
    prototype: GridTask,
}

const EVAL_SALT: u64 = 0xe7a1_0000_0000_0000;

impl ScheduledTask {
    pub fn prototype(&self) -> &GridTask {
        &self.prototype
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    fn env_for(&self, task: GridTask) -> GridEnv {
        GridEnv::new(task.with_tag(self.tag), self.cutoff).with_step_penalty(self.step_penalty)
    }

    /// Environment for the `episode`-th training episode.
    pub fn training_env(&self, episode: u64) -> Result<GridEnv> {
        let task = if self.procedural {
            self.spec.instance(episode)?
        } else {
            self.prototype.clone()
        };
        Ok(self.env_for(task))
    }

    /// Environment for evaluation episode `index`; drawn from a seed stream
    /// disjoint from training episodes.
    pub fn eval_env(&self, index: u64) -> Result<GridEnv> {
        let task = if self.procedural {
            self.spec.instance(EVAL_SALT ^ index)?
        } else {
            self.prototype.clone()
        };
        Ok(self.env_for(task))
    }
}

/// Validates and materialises the task sequence, in order.
pub fn make_schedule(config: &ScheduleConfig) -> Result<Vec<ScheduledTask>> {
    if config.tasks.is_empty() {
        return Err(Error::Config("schedule has no tasks".into()));
    }
    if config.cutoff == 0 {
        return Err(Error::Config("cutoff must be positive".into()));
    }
    config
        .tasks
        .iter()
        .enumerate()
        .map(|(i, entry)| {
            let spec = TaskSpec::new(entry.kind, entry.size, entry.seed);
            Ok(ScheduledTask {
                prototype: spec.generate()?.with_tag(i as u64),
                spec,
                budget: entry.budget,
                tag: i as u64,
                procedural: config.procedural,
                cutoff: config.cutoff,
                step_penalty: config.step_penalty,
            })
        })
        .collect()
}

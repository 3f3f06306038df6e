//! Procedural maze navigation tasks.
//!
//! A perfect maze is carved on a `g x g` grid (`3 <= g <= 6`) by randomized
//! depth-first search. A task adds a random wall-legal walk from the start
//! cell and four candidate destinations labelled A-D, exactly one of which is
//! the walk's endpoint. The oracle policy solves a task by tracing the walk
//! one move per step with line operations and then answering.
//!
//! Rendering: 64-pixel cells separated by 4-pixel black walls on white; the
//! start is a green disc and candidates are blue letters.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::canvas::{encode_png, new_canvas, CanvasError, Point, RasterImage, Rgba};
use crate::dsl::{serialize_response, AnswerValue, DrawOperation, PolicyResponse, QuestionType};
use crate::episode::{
    run_episode, EpisodeConfig, EpisodeError, EpisodeTrace, Policy, PolicyError, PolicyRequest,
    PromptKind,
};
use crate::task::{MazeMeta, Task};

pub const MIN_GRID: usize = 3;
pub const MAX_GRID: usize = 6;
pub const CELL_PX: u32 = 64;
pub const WALL_PX: u32 = 4;
pub const LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

const START_RADIUS: i64 = 14;
const LETTER_SCALE: u32 = 3;
const LETTER_COLOR: Rgba = Rgba::rgb(30, 60, 200);

#[derive(Debug, Error)]
pub enum MazeError {
    #[error("grid size {0} outside {MIN_GRID}..={MAX_GRID}")]
    InvalidSize(usize),
    #[error("illegal move {mv:?} from {from:?} at step {step}")]
    IllegalMove { step: usize, from: Cell, mv: Move },
    #[error(transparent)]
    Canvas(#[from] CanvasError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("oracle trace for {0} did not verify: {1}")]
    OracleFailed(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    /// Pixel centre of the cell's interior.
    pub fn center(self) -> Point {
        let half = (CELL_PX - WALL_PX) as f64 / 2.0;
        Point::new(
            (self.col as u32 * CELL_PX + WALL_PX) as f64 + half,
            (self.row as u32 * CELL_PX + WALL_PX) as f64 + half,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Move {
    Up,
    Down,
    Left,
    Right,
}

impl Move {
    pub const ALL: [Move; 4] = [Move::Up, Move::Down, Move::Left, Move::Right];

    pub fn word(self) -> &'static str {
        match self {
            Move::Up => "up",
            Move::Down => "down",
            Move::Left => "left",
            Move::Right => "right",
        }
    }

    pub fn reverse(self) -> Move {
        match self {
            Move::Up => Move::Down,
            Move::Down => Move::Up,
            Move::Left => Move::Right,
            Move::Right => Move::Left,
        }
    }

    /// Neighbouring cell inside a `g x g` grid, ignoring walls.
    pub fn apply(self, c: Cell, g: usize) -> Option<Cell> {
        match self {
            Move::Up => c.row.checked_sub(1).map(|r| Cell::new(r, c.col)),
            Move::Down => (c.row + 1 < g).then(|| Cell::new(c.row + 1, c.col)),
            Move::Left => c.col.checked_sub(1).map(|k| Cell::new(c.row, k)),
            Move::Right => (c.col + 1 < g).then(|| Cell::new(c.row, c.col + 1)),
        }
    }
}

/// Grid with open passages; always a spanning tree once generated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Maze {
    pub grid_size: usize,
    pub seed: u64,
    pub start: Cell,
    /// `right[r][c]`: passage between `(r, c)` and `(r, c + 1)`.
    right: Vec<Vec<bool>>,
    /// `down[r][c]`: passage between `(r, c)` and `(r + 1, c)`.
    down: Vec<Vec<bool>>,
}

impl Maze {
    fn closed(g: usize, seed: u64, start: Cell) -> Self {
        Self {
            grid_size: g,
            seed,
            start,
            right: vec![vec![false; g]; g],
            down: vec![vec![false; g]; g],
        }
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> {
        let g = self.grid_size;
        (0..g).flat_map(move |r| (0..g).map(move |c| Cell::new(r, c)))
    }

    fn open(&mut self, a: Cell, b: Cell) {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        if a.row == b.row {
            self.right[a.row][a.col] = true;
        } else {
            self.down[a.row][a.col] = true;
        }
    }

    pub fn can_move(&self, from: Cell, mv: Move) -> bool {
        match mv {
            Move::Right => from.col + 1 < self.grid_size && self.right[from.row][from.col],
            Move::Left => from.col > 0 && self.right[from.row][from.col - 1],
            Move::Down => from.row + 1 < self.grid_size && self.down[from.row][from.col],
            Move::Up => from.row > 0 && self.down[from.row - 1][from.col],
        }
    }

    pub fn legal_moves(&self, from: Cell) -> Vec<Move> {
        Move::ALL
            .into_iter()
            .filter(|&m| self.can_move(from, m))
            .collect()
    }

    /// Open passages as ordered cell pairs (`a < b`).
    pub fn passages(&self) -> Vec<(Cell, Cell)> {
        let g = self.grid_size;
        let mut out = Vec::with_capacity(g * g - 1);
        for c in self.cells() {
            if self.right[c.row][c.col] {
                out.push((c, Cell::new(c.row, c.col + 1)));
            }
            if self.down[c.row][c.col] {
                out.push((c, Cell::new(c.row + 1, c.col)));
            }
        }
        out
    }

    /// Cells visited by `actions` from the start, start included.
    pub fn walk(&self, actions: &[Move]) -> Result<Vec<Cell>, MazeError> {
        let mut path = vec![self.start];
        let mut at = self.start;
        for (i, &mv) in actions.iter().enumerate() {
            if !self.can_move(at, mv) {
                return Err(MazeError::IllegalMove {
                    step: i + 1,
                    from: at,
                    mv,
                });
            }
            at = mv.apply(at, self.grid_size).expect("legal move stays in grid");
            path.push(at);
        }
        Ok(path)
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed of task `index` under a dataset's master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    rng_for(master, index).next_u64()
}

/// Randomized depth-first search (recursive backtracker) from a random cell.
pub fn gen_maze(g: usize, seed: u64) -> Result<Maze, MazeError> {
    if !(MIN_GRID..=MAX_GRID).contains(&g) {
        return Err(MazeError::InvalidSize(g));
    }
    let mut rng = rng_for(seed, 0);
    let start = Cell::new(rng.random_range(0..g), rng.random_range(0..g));
    let mut maze = Maze::closed(g, seed, start);
    let mut visited = vec![vec![false; g]; g];
    let root = Cell::new(rng.random_range(0..g), rng.random_range(0..g));
    visited[root.row][root.col] = true;
    let mut stack = vec![root];
    while let Some(&head) = stack.last() {
        let fresh: Vec<Cell> = Move::ALL
            .iter()
            .filter_map(|m| m.apply(head, g))
            .filter(|n| !visited[n.row][n.col])
            .collect();
        if fresh.is_empty() {
            stack.pop();
            continue;
        }
        let next = fresh[rng.random_range(0..fresh.len())];
        visited[next.row][next.col] = true;
        maze.open(head, next);
        stack.push(next);
    }
    Ok(maze)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MazeTask {
    pub maze: Maze,
    /// Candidate cells for A, B, C, D.
    pub candidates: [Cell; 4],
    pub actions: Vec<Move>,
    pub answer: char,
    pub question: String,
}

pub fn question_text(actions: &[Move]) -> String {
    let steps: Vec<String> = actions
        .iter()
        .map(|m| format!("Go {}.", m.word()))
        .collect();
    format!(
        "Determine the final destination from the starting point (green point). Action Sequence: {} Which labeled point (A, B, C or D) is reached?",
        steps.join(" ")
    )
}

pub fn options() -> Vec<String> {
    LETTERS.iter().map(|l| format!("{l}. Point {l}")).collect()
}

/// Random walk of length `2..=2g`, never undoing the previous move unless at a
/// dead end; redrawn until it ends away from the start. Three distractors are
/// drawn from the remaining cells and the four letters are shuffled.
pub fn gen_task(maze: &Maze, seed: u64) -> MazeTask {
    let g = maze.grid_size;
    let mut rng = rng_for(seed, 1);
    let (actions, end) = loop {
        let len = rng.random_range(2..=2 * g);
        let mut at = maze.start;
        let mut prev: Option<Move> = None;
        let mut actions = Vec::with_capacity(len);
        for _ in 0..len {
            let mut moves = maze.legal_moves(at);
            if moves.len() > 1 {
                if let Some(p) = prev {
                    moves.retain(|&m| m != p.reverse());
                }
            }
            let mv = moves[rng.random_range(0..moves.len())];
            at = mv.apply(at, g).expect("legal move stays in grid");
            actions.push(mv);
            prev = Some(mv);
        }
        if at != maze.start {
            break (actions, at);
        }
    };
    let mut others: Vec<Cell> = maze
        .cells()
        .filter(|&c| c != maze.start && c != end)
        .collect();
    others.shuffle(&mut rng);
    let slot = rng.random_range(0..4);
    let mut distractors = others.into_iter();
    let candidates: [Cell; 4] = std::array::from_fn(|i| {
        if i == slot {
            end
        } else {
            distractors.next().expect("grid has at least 9 cells")
        }
    });
    MazeTask {
        question: question_text(&actions),
        maze: maze.clone(),
        candidates,
        actions,
        answer: LETTERS[slot],
    }
}

impl MazeTask {
    pub fn endpoint(&self) -> Cell {
        *self
            .maze
            .walk(&self.actions)
            .expect("generated walks are legal")
            .last()
            .expect("walk includes the start")
    }

    pub fn meta(&self) -> MazeMeta {
        MazeMeta {
            grid_size: self.maze.grid_size,
            start: self.maze.start,
            candidates: self.candidates.to_vec(),
            actions: self.actions.clone(),
        }
    }

    pub fn to_task(&self, id: impl Into<String>, image_path: impl Into<String>) -> Task {
        let g = self.maze.grid_size;
        Task {
            id: id.into(),
            images: vec![image_path.into()],
            question: self.question.clone(),
            qtype: QuestionType::Choice,
            options: Some(options()),
            answer: AnswerValue::Choice(self.answer),
            subtask: Some(format!("maze-{g}x{g}")),
            video: false,
            maze: Some(self.meta()),
        }
    }

    pub fn render(&self) -> RasterImage {
        render_maze(&self.maze, &self.candidates)
    }
}

/// Draws walls, the green start disc and one letter per candidate cell.
pub fn render_maze(maze: &Maze, candidates: &[Cell]) -> RasterImage {
    let g = maze.grid_size as u32;
    let side = g * CELL_PX + WALL_PX;
    let mut img = new_canvas(side, side, Rgba::WHITE).expect("non-zero maze size");
    let (cell, wall) = (CELL_PX as i64, WALL_PX as i64);
    for c in maze.cells() {
        let (x0, y0) = (c.col as i64 * cell, c.row as i64 * cell);
        if !maze.can_move(c, Move::Up) {
            img.fill_rect(x0, y0, x0 + cell + wall, y0 + wall, Rgba::BLACK);
        }
        if !maze.can_move(c, Move::Left) {
            img.fill_rect(x0, y0, x0 + wall, y0 + cell + wall, Rgba::BLACK);
        }
        if !maze.can_move(c, Move::Down) {
            img.fill_rect(x0, y0 + cell, x0 + cell + wall, y0 + cell + wall, Rgba::BLACK);
        }
        if !maze.can_move(c, Move::Right) {
            img.fill_rect(x0 + cell, y0, x0 + cell + wall, y0 + cell + wall, Rgba::BLACK);
        }
    }
    let s = maze.start.center();
    img.fill_disc(s.x as i64, s.y as i64, START_RADIUS, Rgba::GREEN);
    let half = (8 * LETTER_SCALE / 2) as i64;
    for (cand, letter) in candidates.iter().zip(LETTERS) {
        let p = cand.center();
        img.draw_text(
            p.x as i64 - half,
            p.y as i64 - half,
            &letter.to_string(),
            LETTER_SCALE,
            LETTER_COLOR,
        );
    }
    img
}

/// Solves maze tasks by tracing the walk, one line per move, each drawn on the
/// most recent image; answers once the walk is traced or when forced.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePolicy;

pub fn oracle_policy() -> OraclePolicy {
    OraclePolicy
}

impl OraclePolicy {
    fn answer_for(meta: &MazeMeta, path: &[Cell]) -> Result<char, PolicyError> {
        let end = path.last().copied().unwrap_or(meta.start);
        meta.candidates
            .iter()
            .position(|&c| c == end)
            .map(|i| LETTERS[i])
            .ok_or_else(|| PolicyError(format!("walk ends at {end:?}, not a candidate")))
    }
}

impl Policy for OraclePolicy {
    fn respond(&self, req: &PolicyRequest<'_>) -> Result<String, PolicyError> {
        let meta = req
            .task
            .maze
            .as_ref()
            .ok_or_else(|| PolicyError(format!("task {} is not a maze task", req.task.id)))?;
        let mut maze = Maze::closed(meta.grid_size, 0, meta.start);
        // walls are irrelevant to replaying a recorded walk; open along the path
        let mut path = vec![meta.start];
        for &mv in &meta.actions {
            let at = *path.last().expect("non-empty");
            let next = mv
                .apply(at, meta.grid_size)
                .ok_or_else(|| PolicyError(format!("move {mv:?} leaves the grid")))?;
            maze.open(at, next);
            path.push(next);
        }
        let t = req.step;
        let n = meta.actions.len();
        if req.prompt == PromptKind::FinalAnswer || t > n {
            let letter = Self::answer_for(meta, &path)?;
            let resp = PolicyResponse::answer(
                format!("The traced path ends on the point labeled {letter}."),
                letter.to_string(),
            );
            return Ok(serialize_response(&resp));
        }
        let (from, to) = (path[t - 1], path[t]);
        let mv = meta.actions[t - 1];
        let op = DrawOperation::line(
            req.registry.len(),
            vec![from.center(), to.center()],
            format!("move {t} {}", mv.word()),
        );
        let thought = format!(
            "Move {t} of {n}: go {} from row {}, column {} to row {}, column {}.",
            mv.word(),
            from.row + 1,
            from.col + 1,
            to.row + 1,
            to.col + 1
        );
        Ok(serialize_response(&PolicyResponse::thinking(thought, vec![op])))
    }
}

/// One dataset row: the task fields plus generation seed and oracle trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MazeRecord {
    #[serde(flatten)]
    pub task: Task,
    pub seed: u64,
    pub image_path: String,
    pub oracle_trace: EpisodeTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    /// Grid size -> number of tasks.
    pub counts: BTreeMap<usize, usize>,
    pub records: usize,
    pub tasks_file: String,
    pub files: Vec<FileDigest>,
    /// SHA-256 over every file digest in order.
    pub dataset_sha256: String,
}

pub const TASKS_FILE: &str = "tasks.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

struct Generated {
    record: MazeRecord,
    pngs: Vec<(String, Vec<u8>)>,
}

fn generate_one(g: usize, index: usize, master: u64, cfg: &EpisodeConfig) -> Result<Generated, MazeError> {
    let seed = derive_seed(master, index as u64);
    let maze = gen_maze(g, seed)?;
    let mt = gen_task(&maze, seed);
    let id = format!("maze-{g}x{g}-{index:05}");
    let image_path = format!("images/{id}/1.png");
    let task = mt.to_task(&id, &image_path);
    let out = run_episode(&OraclePolicy, &task, vec![mt.render()], cfg, 0)?;
    let mut trace = out.trace;
    let mut pngs = Vec::with_capacity(out.registry.len());
    for (entry, (index, img, _)) in trace.registry.iter_mut().zip(out.registry.iter()) {
        let path = format!("images/{id}/{index}.png");
        pngs.push((path.clone(), encode_png(img)?));
        entry.path = Some(path);
    }
    let rescored = crate::reward::total_reward(
        &trace,
        task.answer,
        crate::reward::DEFAULT_BETA,
        &Default::default(),
    );
    if rescored.total != 2.0 || trace.num_steps() != mt.actions.len() + 1 {
        return Err(MazeError::OracleFailed(
            id,
            format!("reward {} over {} steps", rescored.total, trace.num_steps()),
        ));
    }
    Ok(Generated {
        record: MazeRecord {
            task,
            seed,
            image_path,
            oracle_trace: trace,
        },
        pngs,
    })
}

/// Generates all tasks (in parallel), then writes PNGs, `tasks.jsonl` and
/// `manifest.json` under `out` in a fixed order. Same seed, same bytes.
pub fn emit_dataset(
    counts: &BTreeMap<usize, usize>,
    seed: u64,
    out: &Path,
    cfg: &EpisodeConfig,
) -> Result<DatasetManifest, MazeError> {
    for &g in counts.keys() {
        if !(MIN_GRID..=MAX_GRID).contains(&g) {
            return Err(MazeError::InvalidSize(g));
        }
    }
    let jobs: Vec<(usize, usize)> = counts
        .iter()
        .flat_map(|(&g, &n)| std::iter::repeat_n(g, n))
        .enumerate()
        .map(|(i, g)| (g, i))
        .collect();
    let generated: Vec<Generated> = jobs
        .par_iter()
        .map(|&(g, i)| generate_one(g, i, seed, cfg))
        .collect::<Result<_, _>>()?;

    let io = |p: &Path, e| MazeError::Io(p.to_path_buf(), e);
    fs::create_dir_all(out).map_err(|e| io(out, e))?;
    let mut files = Vec::new();
    let mut jsonl = String::new();
    for gen in &generated {
        for (rel, bytes) in &gen.pngs {
            let path = out.join(rel);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
            }
            fs::write(&path, bytes).map_err(|e| io(&path, e))?;
            files.push(FileDigest {
                path: rel.clone(),
                sha256: hex::encode(Sha256::digest(bytes)),
            });
        }
        jsonl.push_str(&serde_json::to_string(&gen.record).expect("record serializes"));
        jsonl.push('\n');
    }
    let tasks_path = out.join(TASKS_FILE);
    fs::write(&tasks_path, &jsonl).map_err(|e| io(&tasks_path, e))?;
    files.push(FileDigest {
        path: TASKS_FILE.into(),
        sha256: hex::encode(Sha256::digest(jsonl.as_bytes())),
    });
    let mut h = Sha256::new();
    for f in &files {
        h.update(f.path.as_bytes());
        h.update(b"\0");
        h.update(f.sha256.as_bytes());
        h.update(b"\n");
    }
    let manifest = DatasetManifest {
        seed,
        counts: counts.clone(),
        records: generated.len(),
        tasks_file: TASKS_FILE.into(),
        files,
        dataset_sha256: hex::encode(h.finalize()),
    };
    let mpath = out.join(MANIFEST_FILE);
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, body + "\n").map_err(|e| io(&mpath, e))?;
    Ok(manifest)
}

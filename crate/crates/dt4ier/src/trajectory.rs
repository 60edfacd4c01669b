//! Session logs and their conversion into fixed-shape trajectories.
//!
//! A session is one user-day of recommended items and click feedback. Each
//! session yields a two-channel reward (click-through rate, retention), and
//! a user's sessions are windowed into trajectories of `(rtg, state,
//! action, reward)` tuples that the model consumes.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DtError, Result};

/// One recommended item and its click feedback.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interaction {
    /// Item id; ids start at 1, 0 is reserved for padding.
    pub item_id: u32,
    pub clicked: bool,
    /// 0-based slot in the session's recommendation list.
    pub position: u32,
}

/// One user-day of interactions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionRecord {
    pub user_id: u64,
    /// Calendar day index.
    pub day: u32,
    pub interactions: Vec<Interaction>,
}

/// Per-session reward: click-through rate and retention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardPair {
    pub click: f64,
    pub retention: f64,
}

impl RewardPair {
    pub fn new(click: f64, retention: f64) -> Self {
        Self { click, retention }
    }
}

/// Undiscounted suffix sum of [`RewardPair`]s from a session to the end of
/// its trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtgPair {
    pub click: f64,
    pub retention: f64,
}

impl RtgPair {
    pub fn new(click: f64, retention: f64) -> Self {
        Self { click, retention }
    }
}

/// A user's windowed sequence of sessions in model-ready shape.
///
/// `states[t]` holds the last `H` clicked item ids before session `t`
/// (left zero-padded); `actions[t]` holds the session's recommended list
/// (right zero-padded to `N`).
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub user_id: u64,
    pub states: Vec<Vec<u32>>,
    pub actions: Vec<Vec<u32>>,
    pub rewards: Vec<RewardPair>,
    pub rtgs: Vec<RtgPair>,
}

impl Trajectory {
    /// Number of sessions in this (possibly short) trajectory.
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Click-through rate of a session: clicked / shown.
pub fn compute_ctr(session: &SessionRecord) -> Result<f64> {
    if session.interactions.is_empty() {
        return Err(DtError::EmptySession);
    }
    let clicked = session.interactions.iter().filter(|i| i.clicked).count();
    Ok(clicked as f64 / session.interactions.len() as f64)
}

/// Retention reward: reciprocal of the day gap to the user's next session,
/// 0 when the user never returns within the log.
pub fn compute_retention_reward(session: &SessionRecord, next_day: Option<u32>) -> Result<f64> {
    match next_day {
        None => Ok(0.0),
        Some(nd) if nd <= session.day => Err(DtError::NonCausalReturn {
            day: session.day,
            next_day: nd,
        }),
        Some(nd) => Ok(1.0 / (nd - session.day) as f64),
    }
}

/// Componentwise undiscounted suffix sums.
pub fn compute_rtg(rewards: &[RewardPair]) -> Result<Vec<RtgPair>> {
    if rewards.is_empty() {
        return Err(DtError::EmptyRewards);
    }
    let mut out = vec![RtgPair::new(0.0, 0.0); rewards.len()];
    let mut click = 0.0;
    let mut retention = 0.0;
    for (t, r) in rewards.iter().enumerate().rev() {
        click += r.click;
        retention += r.retention;
        out[t] = RtgPair::new(click, retention);
    }
    Ok(out)
}

/// Most recent `min(|history|, h)` clicked items, right-aligned and left
/// zero-padded to width `h`.
pub fn build_state(click_history: &[u32], h: usize) -> Vec<u32> {
    let mut state = vec![0u32; h];
    let take = click_history.len().min(h);
    let src = &click_history[click_history.len() - take..];
    state[h - take..].copy_from_slice(src);
    state
}

/// Shape parameters for [`ingest_log`] and [`sessions_to_trajectories`].
#[derive(Clone, Copy, Debug)]
pub struct IngestOptions {
    /// Trajectory window T.
    pub window: usize,
    /// State width H.
    pub state_len: usize,
    /// Action width N; sessions longer than this are rejected.
    pub max_items: usize,
}

impl IngestOptions {
    pub fn new(window: usize, state_len: usize, max_items: usize) -> Self {
        Self {
            window,
            state_len,
            max_items,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SessionLine {
    user_id: u64,
    day: u32,
    items: Vec<i64>,
    clicks: Vec<u8>,
}

/// Parse a JSONL session log.
///
/// Sessions with an empty item list are dropped with a warning; any other
/// malformed content is an error carrying the 1-based line number.
pub fn read_session_log(path: &Path, max_items: usize) -> Result<Vec<SessionRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut sessions = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SessionLine =
            serde_json::from_str(&line).map_err(|e| DtError::MalformedLine {
                line: line_no,
                reason: e.to_string(),
            })?;
        if parsed.items.len() != parsed.clicks.len() {
            return Err(DtError::MalformedLine {
                line: line_no,
                reason: format!(
                    "items length {} != clicks length {}",
                    parsed.items.len(),
                    parsed.clicks.len()
                ),
            });
        }
        if parsed.items.len() > max_items {
            return Err(DtError::MalformedLine {
                line: line_no,
                reason: format!("session has {} items, limit {}", parsed.items.len(), max_items),
            });
        }
        if parsed.items.is_empty() {
            log::warn!("dropping empty session at line {line_no} (user {})", parsed.user_id);
            continue;
        }
        let mut interactions = Vec::with_capacity(parsed.items.len());
        for (pos, (item, click)) in parsed.items.iter().zip(&parsed.clicks).enumerate() {
            if *item < 1 {
                return Err(DtError::MalformedLine {
                    line: line_no,
                    reason: format!("item id {item} out of range (ids start at 1)"),
                });
            }
            if *click > 1 {
                return Err(DtError::MalformedLine {
                    line: line_no,
                    reason: format!("click flag {click} is not 0/1"),
                });
            }
            interactions.push(Interaction {
                item_id: *item as u32,
                clicked: *click == 1,
                position: pos as u32,
            });
        }
        sessions.push(SessionRecord {
            user_id: parsed.user_id,
            day: parsed.day,
            interactions,
        });
    }
    Ok(sessions)
}

/// Write sessions in the JSONL log format.
pub fn write_session_log(path: &Path, sessions: &[SessionRecord]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in sessions {
        let line = SessionLine {
            user_id: s.user_id,
            day: s.day,
            items: s.interactions.iter().map(|i| i.item_id as i64).collect(),
            clicks: s.interactions.iter().map(|i| u8::from(i.clicked)).collect(),
        };
        serde_json::to_writer(&mut file, &line)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// Group sessions by user, derive rewards, and cut non-overlapping windows
/// of `opts.window` sessions. The trailing partial window becomes a short
/// trajectory. Duplicate `(user, day)` pairs are rejected.
pub fn sessions_to_trajectories(
    sessions: &[SessionRecord],
    opts: &IngestOptions,
) -> Result<Vec<Trajectory>> {
    let mut by_user: HashMap<u64, Vec<&SessionRecord>> = HashMap::new();
    for s in sessions {
        by_user.entry(s.user_id).or_default().push(s);
    }
    let mut user_ids: Vec<u64> = by_user.keys().copied().collect();
    user_ids.sort_unstable();

    let mut out = Vec::new();
    for user_id in user_ids {
        let mut user_sessions = by_user.remove(&user_id).unwrap();
        user_sessions.sort_by_key(|s| s.day);
        for pair in user_sessions.windows(2) {
            if pair[0].day == pair[1].day {
                return Err(DtError::DuplicateSession {
                    user_id,
                    day: pair[0].day,
                });
            }
        }

        // Per-session rewards over the user's full history.
        let mut rewards = Vec::with_capacity(user_sessions.len());
        for (i, s) in user_sessions.iter().enumerate() {
            let next_day = user_sessions.get(i + 1).map(|n| n.day);
            rewards.push(RewardPair::new(
                compute_ctr(s)?,
                compute_retention_reward(s, next_day)?,
            ));
        }

        // States from the running clicked-item history (logged clicks).
        let mut click_history: Vec<u32> = Vec::new();
        let mut states = Vec::with_capacity(user_sessions.len());
        let mut actions = Vec::with_capacity(user_sessions.len());
        for s in &user_sessions {
            states.push(build_state(&click_history, opts.state_len));
            let mut action = vec![0u32; opts.max_items];
            for (k, it) in s.interactions.iter().enumerate() {
                action[k] = it.item_id;
                if it.clicked {
                    click_history.push(it.item_id);
                }
            }
            actions.push(action);
        }

        // Non-overlapping windows; RTG restarts inside each window.
        let total = user_sessions.len();
        let mut start = 0;
        while start < total {
            let end = (start + opts.window).min(total);
            let window_rewards = rewards[start..end].to_vec();
            let rtgs = compute_rtg(&window_rewards)?;
            out.push(Trajectory {
                user_id,
                states: states[start..end].to_vec(),
                actions: actions[start..end].to_vec(),
                rewards: window_rewards,
                rtgs,
            });
            start = end;
        }
    }
    Ok(out)
}

/// Read a session log and window it into trajectories.
pub fn ingest_log(path: &Path, opts: &IngestOptions) -> Result<Vec<Trajectory>> {
    let sessions = read_session_log(path, opts.max_items)?;
    sessions_to_trajectories(&sessions, opts)
}

/// Versioned trajectory-cache line: the session-log fields plus the
/// derived per-window arrays.
#[derive(Serialize, Deserialize)]
struct TrajectoryLine {
    schema: String,
    user_id: u64,
    states: Vec<Vec<u32>>,
    actions: Vec<Vec<u32>>,
    rewards: Vec<(f64, f64)>,
    rtgs: Vec<(f64, f64)>,
}

pub const TRAJECTORY_SCHEMA: &str = "traj-v1";

pub fn write_trajectory_cache(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in trajectories {
        let line = TrajectoryLine {
            schema: TRAJECTORY_SCHEMA.to_string(),
            user_id: t.user_id,
            states: t.states.clone(),
            actions: t.actions.clone(),
            rewards: t.rewards.iter().map(|r| (r.click, r.retention)).collect(),
            rtgs: t.rtgs.iter().map(|r| (r.click, r.retention)).collect(),
        };
        serde_json::to_writer(&mut file, &line)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_trajectory_cache(path: &Path) -> Result<Vec<Trajectory>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TrajectoryLine =
            serde_json::from_str(&line).map_err(|e| DtError::MalformedLine {
                line: idx + 1,
                reason: e.to_string(),
            })?;
        if parsed.schema != TRAJECTORY_SCHEMA {
            return Err(DtError::MalformedLine {
                line: idx + 1,
                reason: format!("unknown schema {:?}", parsed.schema),
            });
        }
        out.push(Trajectory {
            user_id: parsed.user_id,
            states: parsed.states,
            actions: parsed.actions,
            rewards: parsed
                .rewards
                .iter()
                .map(|(c, r)| RewardPair::new(*c, *r))
                .collect(),
            rtgs: parsed.rtgs.iter().map(|(c, r)| RtgPair::new(*c, *r)).collect(),
        });
    }
    Ok(out)
}

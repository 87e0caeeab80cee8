//! Control core: follows grains across frames, settles each grain's class
//! once it leaves the field of view and schedules the valve pulse that
//! meets it at the ejection point.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::GrainClass;
use crate::geometry::{argmax, nms, PixelPoint, NUM_CLASSES};
use crate::{Calibration64, Detection64, LineConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedulerError {
    #[error("track {0} has no observations")]
    EmptyHistory(u64),
    #[error("track {track}: observation at {t} s is not after {last} s")]
    NonMonotonic { track: u64, t: f64, last: f64 },
    #[error("track {track}: fire time {fire_at:.6} s already passed at {now:.6} s")]
    Late { track: u64, fire_at: f64, now: f64 },
    #[error("track {0} is not finalized")]
    NotFinalized(u64),
}

/// Frames a track may go undetected inside the field of view before it is dropped.
pub const MAX_MISSED_FRAMES: u32 = 3;

/// One detection of a tracked grain, in belt coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub t: f64,
    pub along: f64,
    pub cross: f64,
    pub class_probs: [f64; NUM_CLASSES],
    /// The box touched the image border, so its centre is biased.
    pub truncated: bool,
}

impl Observation {
    pub fn vote(&self) -> GrainClass {
        GrainClass::ALL[argmax(&self.class_probs)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrackState {
    Active,
    Finalized,
    Expired,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    id: u64,
    history: Vec<Observation>,
    decided: Option<GrainClass>,
    state: TrackState,
    missed: u32,
}

impl Track {
    pub fn new(id: u64, first: Observation) -> Self {
        Self {
            id,
            history: vec![first],
            decided: None,
            state: TrackState::Active,
            missed: 0,
        }
    }

    /// Builds a track from a full history, for tests and replays.
    pub fn from_history(id: u64, history: Vec<Observation>) -> Result<Self, SchedulerError> {
        let mut iter = history.into_iter();
        let first = iter.next().ok_or(SchedulerError::EmptyHistory(id))?;
        let mut track = Track::new(id, first);
        for obs in iter {
            track.push(obs)?;
        }
        Ok(track)
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn history(&self) -> &[Observation] {
        &self.history
    }

    pub fn state(&self) -> TrackState {
        self.state
    }

    pub fn decided_class(&self) -> Option<GrainClass> {
        self.decided
    }

    pub fn push(&mut self, obs: Observation) -> Result<(), SchedulerError> {
        if let Some(last) = self.history.last() {
            if !(obs.t > last.t) {
                return Err(SchedulerError::NonMonotonic {
                    track: self.id,
                    t: obs.t,
                    last: last.t,
                });
            }
        }
        self.history.push(obs);
        self.missed = 0;
        Ok(())
    }

    /// Observations usable for kinematics: untruncated ones, or everything
    /// when the grain was never fully in view.
    fn kinematic_obs(&self) -> impl Iterator<Item = &Observation> {
        let any_clean = self.history.iter().any(|o| !o.truncated);
        self.history
            .iter()
            .filter(move |o| !any_clean || !o.truncated)
    }

    /// Time of the last observation used for prediction.
    pub fn reference_time(&self) -> f64 {
        self.kinematic_obs().last().map(|o| o.t).unwrap_or(f64::NAN)
    }

    /// Constant-velocity position estimate: the least-squares intercept of
    /// the observed positions at the known belt speed.
    pub fn predicted_along(&self, t: f64, belt_speed: f64) -> f64 {
        let (sum, n) = self
            .kinematic_obs()
            .fold((0.0, 0usize), |(s, n), o| (s + o.along + belt_speed * (t - o.t), n + 1));
        sum / n as f64
    }

    pub fn mean_cross(&self) -> f64 {
        let sum: f64 = self.history.iter().map(|o| o.cross).sum();
        sum / self.history.len() as f64
    }

    /// Decides the class by majority vote and closes the track.
    pub fn finalize(&mut self) -> Result<GrainClass, SchedulerError> {
        let class = decide_class(self)?;
        self.decided = Some(class);
        self.state = TrackState::Finalized;
        Ok(class)
    }

    fn last_cross(&self) -> f64 {
        self.history.last().map(|o| o.cross).unwrap_or(f64::NAN)
    }
}

/// Majority vote over per-frame argmax classes. Ties go to the tied class
/// seen most recently.
pub fn decide_class(track: &Track) -> Result<GrainClass, SchedulerError> {
    if track.history.is_empty() {
        return Err(SchedulerError::EmptyHistory(track.id));
    }
    let mut counts = [0usize; NUM_CLASSES];
    let mut latest = [0usize; NUM_CLASSES];
    for (i, obs) in track.history.iter().enumerate() {
        let c = obs.vote().index();
        counts[c] += 1;
        latest[c] = i;
    }
    let top = *counts.iter().max().expect("six classes");
    let winner = (0..NUM_CLASSES)
        .filter(|&c| counts[c] == top)
        .max_by_key(|&c| latest[c])
        .expect("at least one class has the top count");
    Ok(GrainClass::ALL[winner])
}

/// A valve pulse order: open `nozzle` at `fire_at` (s) for `pulse_ms`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EjectionCommand {
    pub nozzle: usize,
    pub fire_at: f64,
    pub pulse_ms: f64,
}

impl EjectionCommand {
    pub fn end(&self) -> f64 {
        self.fire_at + self.pulse_ms / 1000.0
    }

    /// Interval during which the jet is on, shifted by the valve switching delay.
    pub fn active_window(&self, valve_switch_ms: f64) -> (f64, f64) {
        let delay = valve_switch_ms / 1000.0;
        (self.fire_at + delay, self.end() + delay)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EjectionPlan {
    Keep,
    Eject(EjectionCommand),
}

/// Nozzle whose lane centre is closest to `cross_mm`.
pub fn nearest_nozzle(cross_mm: f64, config: &LineConfig) -> usize {
    (0..config.lane_count as usize)
        .min_by(|&a, &b| {
            let da = (cross_mm - config.lane_center(a)).abs();
            let db = (cross_mm - config.lane_center(b)).abs();
            da.total_cmp(&db)
        })
        .expect("at least one lane")
}

/// Decides whether and when to fire for a finalized track.
///
/// `fire_at = t_ref + (ejection point - along(t_ref)) / v - valve switch`,
/// where `t_ref` is the last kinematic observation. A fire time not after
/// `now` is reported as [`SchedulerError::Late`].
pub fn plan_ejection(
    track: &Track,
    config: &LineConfig,
    now: f64,
) -> Result<EjectionPlan, SchedulerError> {
    let class = match (track.state, track.decided) {
        (TrackState::Finalized, Some(c)) => c,
        _ => return Err(SchedulerError::NotFinalized(track.id)),
    };
    if !class.should_eject() {
        return Ok(EjectionPlan::Keep);
    }
    let t_ref = track.reference_time();
    let along = track.predicted_along(t_ref, config.belt_speed);
    let fire_at = t_ref + (config.planned_ejection_mm() - along) / config.belt_speed
        - config.valve_switch_ms / 1000.0;
    if !(fire_at > now) {
        return Err(SchedulerError::Late {
            track: track.id,
            fire_at,
            now,
        });
    }
    Ok(EjectionPlan::Eject(EjectionCommand {
        nozzle: nearest_nozzle(track.mean_cross(), config),
        fire_at,
        pulse_ms: config.pulse_ms,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct TimeKey(f64, u64);

impl Eq for TimeKey {}

impl PartialOrd for TimeKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TimeKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Pending valve commands ordered by fire time. Commands on one nozzle
/// whose pulses overlap or touch are merged into a single longer pulse, so
/// pending windows on a nozzle are always disjoint.
#[derive(Debug, Clone, Default)]
pub struct CommandQueue {
    pending: Vec<BTreeMap<TimeKey, EjectionCommand>>,
    seq: u64,
}

impl CommandQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.pending.iter().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.iter().all(BTreeMap::is_empty)
    }

    /// Inserts `cmd`, merging with overlapping commands on the same
    /// nozzle. Returns the command as stored.
    pub fn push(&mut self, cmd: EjectionCommand) -> EjectionCommand {
        if self.pending.len() <= cmd.nozzle {
            self.pending.resize_with(cmd.nozzle + 1, BTreeMap::new);
        }
        let lane = &mut self.pending[cmd.nozzle];
        let mut start = cmd.fire_at;
        let mut end = cmd.end();
        // Disjoint windows sorted by start also have sorted ends, so the
        // overlapping ones form a contiguous run ending at the last start <= end.
        let overlapping: Vec<TimeKey> = lane
            .range(..=TimeKey(end, u64::MAX))
            .rev()
            .take_while(|(_, c)| c.end() >= start)
            .map(|(k, _)| *k)
            .collect();
        if overlapping.is_empty() {
            self.seq += 1;
            lane.insert(TimeKey(cmd.fire_at, self.seq), cmd);
            return cmd;
        }
        for key in overlapping {
            let old = lane.remove(&key).expect("key collected from map");
            start = start.min(old.fire_at);
            end = end.max(old.end());
        }
        let merged = EjectionCommand {
            nozzle: cmd.nozzle,
            fire_at: start,
            pulse_ms: (end - start) * 1000.0,
        };
        self.seq += 1;
        lane.insert(TimeKey(start, self.seq), merged);
        merged
    }

    /// Removes and returns every command with `fire_at <= now`, in fire order.
    pub fn pop_due(&mut self, now: f64) -> Vec<EjectionCommand> {
        let mut due: Vec<(TimeKey, EjectionCommand)> = Vec::new();
        for lane in &mut self.pending {
            while let Some(entry) = lane.first_entry() {
                if entry.key().0 > now {
                    break;
                }
                let key = *entry.key();
                due.push((key, entry.remove()));
            }
        }
        due.sort_by_key(|d| d.0);
        due.into_iter().map(|(_, c)| c).collect()
    }
}

/// Queue handle shared between the frame-processing side and the valve driver.
pub type SharedQueue = Arc<Mutex<CommandQueue>>;

/// Receives fired valve commands.
pub trait CommandSink {
    fn send(&mut self, cmd: &EjectionCommand) -> io::Result<()>;
}

impl CommandSink for Vec<EjectionCommand> {
    fn send(&mut self, cmd: &EjectionCommand) -> io::Result<()> {
        self.push(*cmd);
        Ok(())
    }
}

/// Writes `fire_at_s,nozzle,pulse_ms` lines, one per command.
pub struct FileSink<W: Write> {
    out: W,
}

impl<W: Write> FileSink<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> CommandSink for FileSink<W> {
    fn send(&mut self, cmd: &EjectionCommand) -> io::Result<()> {
        writeln!(self.out, "{},{},{}", cmd.fire_at, cmd.nozzle, cmd.pulse_ms)
    }
}

/// Reads a command log written by [`FileSink`].
pub fn read_command_log<R: BufRead>(input: R) -> io::Result<Vec<EjectionCommand>> {
    let bad = |line: usize, msg: &str| {
        io::Error::new(io::ErrorKind::InvalidData, format!("line {line}: {msg}"))
    };
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(bad(i + 1, "expected fire_at_s,nozzle,pulse_ms"));
        }
        out.push(EjectionCommand {
            fire_at: fields[0].parse().map_err(|_| bad(i + 1, "bad fire_at"))?,
            nozzle: fields[1].parse().map_err(|_| bad(i + 1, "bad nozzle"))?,
            pulse_ms: fields[2].parse().map_err(|_| bad(i + 1, "bad pulse_ms"))?,
        });
    }
    Ok(out)
}

/// Multi-grain tracker with constant-velocity prediction and greedy gating.
#[derive(Debug, Clone, Default)]
pub struct Tracker {
    tracks: Vec<Track>,
    next_id: u64,
}

/// Tracks that left the active set during one association step.
#[derive(Debug, Default)]
pub struct AssociationOutcome {
    pub matched: usize,
    pub spawned: usize,
    /// Unmatched tracks predicted past the decision line.
    pub exited: Vec<Track>,
    pub expired: Vec<Track>,
}

impl Tracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    /// Converts a detection to a belt-space observation.
    pub fn observe(
        det: &Detection64,
        t: f64,
        cal: &Calibration64,
    ) -> Result<Observation, crate::geometry::GeometryError> {
        let (cx, cy) = det.bbox.center();
        let belt = cal.px_to_belt(PixelPoint { x: cx, y: cy })?;
        let b = &det.bbox;
        let truncated = b.x_min() <= 0.0
            || b.y_min() <= 0.0
            || b.x_max() >= cal.image_width
            || b.y_max() >= cal.image_height;
        Ok(Observation {
            t,
            along: belt.along,
            cross: belt.cross,
            class_probs: *det.class_probs(),
            truncated,
        })
    }

    /// Matches observations taken at `t` to the current tracks.
    ///
    /// Candidate pairs lie within `lane_pitch / 2` of a track's predicted
    /// centre; pairs are taken nearest first, older track first on ties.
    /// Leftover observations start new tracks. An unmatched track past the
    /// end of the field of view is returned as exited; one still inside
    /// that misses more than [`MAX_MISSED_FRAMES`] frames is expired.
    pub fn associate(
        &mut self,
        t: f64,
        observations: Vec<Observation>,
        config: &LineConfig,
    ) -> AssociationOutcome {
        let gate = config.lane_pitch / 2.0;
        let v = config.belt_speed;
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (ti, track) in self.tracks.iter().enumerate() {
            let along = track.predicted_along(t, v);
            let cross = track.last_cross();
            for (oi, obs) in observations.iter().enumerate() {
                let d = (obs.along - along).hypot(obs.cross - cross);
                if d < gate {
                    pairs.push((d, ti, oi));
                }
            }
        }
        // Tracks are stored in creation order, so the index breaks ties
        // toward the older track.
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut track_used = vec![false; self.tracks.len()];
        let mut obs_slot: Vec<Option<Observation>> = observations.into_iter().map(Some).collect();
        let mut outcome = AssociationOutcome::default();
        for (_, ti, oi) in pairs {
            if track_used[ti] || obs_slot[oi].is_none() {
                continue;
            }
            let obs = obs_slot[oi].take().expect("checked above");
            if self.tracks[ti].push(obs).is_ok() {
                track_used[ti] = true;
                outcome.matched += 1;
            }
        }

        let mut kept = Vec::with_capacity(self.tracks.len());
        for (track, used) in std::mem::take(&mut self.tracks).into_iter().zip(track_used) {
            if used {
                kept.push(track);
                continue;
            }
            let mut track = track;
            track.missed += 1;
            if track.predicted_along(t, v) >= config.fov_along {
                outcome.exited.push(track);
            } else if track.missed > MAX_MISSED_FRAMES {
                track.state = TrackState::Expired;
                outcome.expired.push(track);
            } else {
                kept.push(track);
            }
        }
        self.tracks = kept;

        for obs in obs_slot.into_iter().flatten() {
            self.tracks.push(Track::new(self.next_id, obs));
            self.next_id += 1;
            outcome.spawned += 1;
        }
        outcome
    }
}

/// What the controller did with one frame.
#[derive(Debug, Default)]
pub struct FrameOutcome {
    pub decisions: Vec<Decision>,
    pub issued: Vec<EjectionCommand>,
    pub late: Vec<SchedulerError>,
    pub expired: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub track_id: u64,
    pub class: GrainClass,
    pub plan: Option<EjectionCommand>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerStats {
    pub frames: u64,
    pub finalized: u64,
    pub ejections_planned: u64,
    pub late_commands: u64,
    pub expired_tracks: u64,
}

/// Frame-driven controller. Frame processing and the valve driver share
/// only the command queue, which each side locks briefly.
pub struct Scheduler {
    config: LineConfig,
    cal: Calibration64,
    tracker: Tracker,
    queue: SharedQueue,
    stats: SchedulerStats,
}

impl Scheduler {
    pub fn new(config: LineConfig) -> Self {
        let cal = config.calibration();
        Self {
            config,
            cal,
            tracker: Tracker::new(),
            queue: Arc::new(Mutex::new(CommandQueue::new())),
            stats: SchedulerStats::default(),
        }
    }

    pub fn config(&self) -> &LineConfig {
        &self.config
    }

    pub fn stats(&self) -> SchedulerStats {
        self.stats
    }

    pub fn tracker(&self) -> &Tracker {
        &self.tracker
    }

    /// Handle for a valve-driver thread calling [`CommandQueue::pop_due`].
    pub fn queue_handle(&self) -> SharedQueue {
        Arc::clone(&self.queue)
    }

    fn queue(&self) -> MutexGuard<'_, CommandQueue> {
        self.queue.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Processes the detections of a frame captured at `captured_at` while
    /// the controller clock reads `now`.
    pub fn on_frame(&mut self, captured_at: f64, detections: &[Detection64], now: f64) -> FrameOutcome {
        self.stats.frames += 1;
        let kept = nms(detections, self.config.nms_iou_threshold);
        let observations: Vec<Observation> = kept
            .iter()
            .filter_map(|d| Tracker::observe(d, captured_at, &self.cal).ok())
            .collect();
        let assoc = self.tracker.associate(captured_at, observations, &self.config);

        let mut outcome = FrameOutcome {
            expired: assoc.expired.len(),
            ..FrameOutcome::default()
        };
        self.stats.expired_tracks += assoc.expired.len() as u64;

        for mut track in assoc.exited {
            let class = track.finalize().expect("tracks start with one observation");
            self.stats.finalized += 1;
            let plan = match plan_ejection(&track, &self.config, now) {
                Ok(EjectionPlan::Keep) => None,
                Ok(EjectionPlan::Eject(cmd)) => {
                    self.stats.ejections_planned += 1;
                    let stored = self.queue().push(cmd);
                    outcome.issued.push(stored);
                    Some(cmd)
                }
                Err(e) => {
                    self.stats.late_commands += 1;
                    outcome.late.push(e);
                    None
                }
            };
            outcome.decisions.push(Decision {
                track_id: track.id,
                class,
                plan,
            });
        }
        outcome
    }

    pub fn pop_due(&self, now: f64) -> Vec<EjectionCommand> {
        self.queue().pop_due(now)
    }
}

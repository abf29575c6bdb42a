//! Label taxonomy, sequence windowing and batch streaming.
//!
//! Per-frame records are grouped by video, cut into consecutive
//! non-overlapping windows of [`SEQ_LEN`] frames (so every frame is scored
//! exactly once), and the final partial window is zero-padded with
//! `mask = false` and the ignore label. Windows never span videos.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::{FEATURE_DIM, IGNORE_LABEL, NUM_CLASSES, SEQ_LEN};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;

/// The 8 expression categories with their canonical integer codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ExpressionLabel {
    Neutral = 0,
    Anger = 1,
    Disgust = 2,
    Fear = 3,
    Happiness = 4,
    Sadness = 5,
    Surprise = 6,
    Other = 7,
}

impl ExpressionLabel {
    pub const ALL: [ExpressionLabel; NUM_CLASSES] = [
        ExpressionLabel::Neutral,
        ExpressionLabel::Anger,
        ExpressionLabel::Disgust,
        ExpressionLabel::Fear,
        ExpressionLabel::Happiness,
        ExpressionLabel::Sadness,
        ExpressionLabel::Surprise,
        ExpressionLabel::Other,
    ];

    pub fn code(self) -> i32 {
        self as i32
    }

    pub fn from_code(code: i32) -> Result<Self> {
        Self::ALL
            .get(usize::try_from(code).map_err(|_| bad_code(code))?)
            .copied()
            .ok_or_else(|| bad_code(code))
    }

    pub fn name(self) -> &'static str {
        match self {
            ExpressionLabel::Neutral => "Neutral",
            ExpressionLabel::Anger => "Anger",
            ExpressionLabel::Disgust => "Disgust",
            ExpressionLabel::Fear => "Fear",
            ExpressionLabel::Happiness => "Happiness",
            ExpressionLabel::Sadness => "Sadness",
            ExpressionLabel::Surprise => "Surprise",
            ExpressionLabel::Other => "Other",
        }
    }
}

fn bad_code(code: i32) -> Error {
    Error::input(format!("expression code {code} is outside 0..{NUM_CLASSES}"))
}

/// One frame of one video: the feature payload plus its label (a class
/// code or the ignore sentinel).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub video_id: String,
    pub frame_index: usize,
    pub features: Vec<f64>,
    pub label: i32,
}

/// All frames of one video, in frame order, features flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFrames {
    video_id: String,
    features: Vec<f64>,
    labels: Vec<i32>,
}

impl VideoFrames {
    pub fn new(video_id: String, features: Vec<f64>, labels: Vec<i32>) -> Result<Self> {
        if features.len() != labels.len() * FEATURE_DIM {
            return Err(Error::input(format!(
                "video {video_id}: {} feature values do not form {} rows of width {FEATURE_DIM}",
                features.len(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::input(format!("video {video_id} has no frames")));
        }
        for (i, &l) in labels.iter().enumerate() {
            if l != IGNORE_LABEL && (l < 0 || l as usize >= NUM_CLASSES) {
                return Err(Error::input(format!(
                    "video {video_id}: label {l} at frame {i} is outside 0..{NUM_CLASSES}"
                )));
            }
        }
        if let Some(bad) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!(
                "video {video_id}: non-finite feature value at index {bad}"
            )));
        }
        Ok(VideoFrames {
            video_id,
            features,
            labels,
        })
    }

    pub fn from_records(video_id: String, records: &[SampleRecord]) -> Result<Self> {
        let mut features = Vec::with_capacity(records.len() * FEATURE_DIM);
        let mut labels = Vec::with_capacity(records.len());
        for r in records {
            if r.features.len() != FEATURE_DIM {
                return Err(Error::input(format!(
                    "record {}/{} carries {} features, expected {FEATURE_DIM}",
                    r.video_id,
                    r.frame_index,
                    r.features.len()
                )));
            }
            features.extend_from_slice(&r.features);
            labels.push(r.label);
        }
        VideoFrames::new(video_id, features, labels)
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn frame_count(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn frame_features(&self, frame: usize) -> &[f64] {
        &self.features[frame * FEATURE_DIM..(frame + 1) * FEATURE_DIM]
    }
}

/// One model input window: [`SEQ_LEN`] timesteps of [`FEATURE_DIM`]
/// features, per-step labels, and a validity mask marking real frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    pub start_frame: usize,
    /// Row-major `[SEQ_LEN, FEATURE_DIM]`, zero-padded past the real frames.
    pub features: Vec<f64>,
    /// `SEQ_LEN` labels; padded positions carry the ignore label.
    pub labels: Vec<i32>,
    /// `SEQ_LEN` flags; true marks a real (non-padded) frame.
    pub mask: Vec<bool>,
}

impl FeatureSequence {
    /// Number of real frames in this window.
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Cut every video into consecutive non-overlapping windows of
/// [`SEQ_LEN`] frames. The final partial window is zero-padded.
pub fn window_sequences(videos: &[VideoFrames]) -> Vec<FeatureSequence> {
    let mut windows = Vec::new();
    for video in videos {
        let frames = video.frame_count();
        let mut start = 0;
        while start < frames {
            let real = (frames - start).min(SEQ_LEN);
            let mut features = vec![0.0; SEQ_LEN * FEATURE_DIM];
            let mut labels = vec![IGNORE_LABEL; SEQ_LEN];
            let mut mask = vec![false; SEQ_LEN];
            for pos in 0..real {
                features[pos * FEATURE_DIM..(pos + 1) * FEATURE_DIM]
                    .copy_from_slice(video.frame_features(start + pos));
                labels[pos] = video.labels[start + pos];
                mask[pos] = true;
            }
            windows.push(FeatureSequence {
                video_id: video.video_id.clone(),
                start_frame: start,
                features,
                labels,
                mask,
            });
            start += SEQ_LEN;
        }
    }
    windows
}

/// A shuffled mini-batch of windows, features flattened to
/// `[len, SEQ_LEN, FEATURE_DIM]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub len: usize,
    pub features: Vec<f64>,
    pub labels: Vec<i32>,
    pub mask: Vec<bool>,
    /// `(video_id, start_frame)` of each window, for traceability.
    pub window_ids: Vec<(String, usize)>,
}

impl SequenceBatch {
    pub fn window_features(&self, i: usize) -> &[f64] {
        &self.features[i * SEQ_LEN * FEATURE_DIM..(i + 1) * SEQ_LEN * FEATURE_DIM]
    }

    pub fn window_labels(&self, i: usize) -> &[i32] {
        &self.labels[i * SEQ_LEN..(i + 1) * SEQ_LEN]
    }
}

/// Lazy stream of shuffled batches; every window appears exactly once per
/// pass. The final batch may be smaller than `batch_size`.
pub struct BatchStream<'a> {
    windows: &'a [FeatureSequence],
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl<'a> Iterator for BatchStream<'a> {
    type Item = SequenceBatch;

    fn next(&mut self) -> Option<SequenceBatch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let picks = &self.order[self.cursor..end];
        self.cursor = end;
        let len = picks.len();
        let mut features = Vec::with_capacity(len * SEQ_LEN * FEATURE_DIM);
        let mut labels = Vec::with_capacity(len * SEQ_LEN);
        let mut mask = Vec::with_capacity(len * SEQ_LEN);
        let mut window_ids = Vec::with_capacity(len);
        for &idx in picks {
            let w = &self.windows[idx];
            features.extend_from_slice(&w.features);
            labels.extend_from_slice(&w.labels);
            mask.extend_from_slice(&w.mask);
            window_ids.push((w.video_id.clone(), w.start_frame));
        }
        Some(SequenceBatch {
            len,
            features,
            labels,
            mask,
            window_ids,
        })
    }
}

/// Seeded shuffle of the windows into a batch stream.
pub fn make_batches<'a>(
    windows: &'a [FeatureSequence],
    batch_size: usize,
    rng: &mut RngState,
) -> Result<BatchStream<'a>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(rng);
    Ok(BatchStream {
        windows,
        order,
        batch_size,
        cursor: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rand_vec;
    use proptest::prelude::*;

    fn synthetic_video(id: &str, frames: usize, seed: u64) -> VideoFrames {
        let mut rng = RngState::new(seed);
        let features = rand_vec(&mut rng, frames * FEATURE_DIM, 1.0);
        let labels: Vec<i32> = (0..frames).map(|i| (i % NUM_CLASSES) as i32).collect();
        VideoFrames::new(id.into(), features, labels).unwrap()
    }

    #[test]
    fn label_codes_are_bijective() {
        for label in ExpressionLabel::ALL {
            assert_eq!(ExpressionLabel::from_code(label.code()).unwrap(), label);
        }
        assert_eq!(ExpressionLabel::Neutral.code(), 0);
        assert_eq!(ExpressionLabel::Anger.code(), 1);
        assert_eq!(ExpressionLabel::Disgust.code(), 2);
        assert_eq!(ExpressionLabel::Fear.code(), 3);
        assert_eq!(ExpressionLabel::Happiness.code(), 4);
        assert_eq!(ExpressionLabel::Sadness.code(), 5);
        assert_eq!(ExpressionLabel::Surprise.code(), 6);
        assert_eq!(ExpressionLabel::Other.code(), 7);
        assert!(ExpressionLabel::from_code(8).is_err());
        assert!(ExpressionLabel::from_code(-1).is_err());
    }

    #[test]
    fn video_of_two_full_windows() {
        let video = synthetic_video("v", 128, 1);
        let windows = window_sequences(&[video]);
        assert_eq!(windows.len(), 2);
        assert!(windows.iter().all(|w| w.real_len() == SEQ_LEN));
        assert_eq!(windows[0].start_frame, 0);
        assert_eq!(windows[1].start_frame, 64);
    }

    #[test]
    fn partial_tail_is_padded_and_masked() {
        let video = synthetic_video("v", 70, 2);
        let windows = window_sequences(&[video]);
        assert_eq!(windows.len(), 2);
        assert_eq!(windows[0].real_len(), 64);
        assert_eq!(windows[1].real_len(), 6);
        let mask_sum: usize = windows.iter().map(|w| w.real_len()).sum();
        assert_eq!(mask_sum, 70);
        // Padding carries zero features and the ignore label.
        let tail = &windows[1];
        for pos in 6..SEQ_LEN {
            assert!(!tail.mask[pos]);
            assert_eq!(tail.labels[pos], IGNORE_LABEL);
            assert!(tail.features[pos * FEATURE_DIM..(pos + 1) * FEATURE_DIM]
                .iter()
                .all(|v| *v == 0.0));
        }
    }

    #[test]
    fn single_frame_video() {
        let video = synthetic_video("v", 1, 3);
        let windows = window_sequences(&[video]);
        assert_eq!(windows.len(), 1);
        assert_eq!(windows[0].real_len(), 1);
    }

    #[test]
    fn windows_never_span_videos() {
        let a = synthetic_video("a", 70, 4);
        let b = synthetic_video("b", 10, 5);
        let windows = window_sequences(&[a, b]);
        assert_eq!(windows.len(), 3);
        assert_eq!(windows[0].video_id, "a");
        assert_eq!(windows[1].video_id, "a");
        assert_eq!(windows[2].video_id, "b");
        assert_eq!(windows[2].real_len(), 10);
    }

    #[test]
    fn thirty_two_windows_make_two_batches_of_sixteen() {
        let videos: Vec<VideoFrames> = (0..32)
            .map(|i| synthetic_video(&format!("v{i}"), 64, i as u64))
            .collect();
        let windows = window_sequences(&videos);
        assert_eq!(windows.len(), 32);
        let mut rng = RngState::new(0);
        let batches: Vec<SequenceBatch> = make_batches(&windows, 16, &mut rng).unwrap().collect();
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.len == 16));
    }

    #[test]
    fn remainder_batch_is_smaller() {
        let videos: Vec<VideoFrames> = (0..5)
            .map(|i| synthetic_video(&format!("v{i}"), 64, i as u64))
            .collect();
        let windows = window_sequences(&videos);
        let mut rng = RngState::new(0);
        let batches: Vec<SequenceBatch> = make_batches(&windows, 16, &mut rng).unwrap().collect();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].len, 5);
    }

    #[test]
    fn same_seed_gives_identical_batch_order() {
        let videos: Vec<VideoFrames> = (0..9)
            .map(|i| synthetic_video(&format!("v{i}"), 64, i as u64))
            .collect();
        let windows = window_sequences(&videos);
        let collect = |seed: u64| -> Vec<Vec<(String, usize)>> {
            let mut rng = RngState::new(seed);
            make_batches(&windows, 4, &mut rng)
                .unwrap()
                .map(|b| b.window_ids)
                .collect()
        };
        assert_eq!(collect(7), collect(7));
        assert_ne!(collect(7), collect(8));
    }

    #[test]
    fn zero_batch_size_is_config_error() {
        let mut rng = RngState::new(0);
        assert!(matches!(
            make_batches(&[], 0, &mut rng),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn windowing_round_trips_every_video(
            lengths in proptest::collection::vec(1usize..200, 1..5),
            seed in 0u64..500,
        ) {
            let videos: Vec<VideoFrames> = lengths
                .iter()
                .enumerate()
                .map(|(i, &n)| synthetic_video(&format!("v{i}"), n, seed + i as u64))
                .collect();
            let windows = window_sequences(&videos);
            for video in &videos {
                let mine: Vec<&FeatureSequence> = windows
                    .iter()
                    .filter(|w| w.video_id == *video.video_id())
                    .collect();
                // Mask bits sum to the frame count.
                let mask_sum: usize = mine.iter().map(|w| w.real_len()).sum();
                prop_assert_eq!(mask_sum, video.frame_count());
                // Flattening real positions reproduces the record sequence.
                let mut frame = 0usize;
                for w in mine {
                    for pos in 0..SEQ_LEN {
                        if !w.mask[pos] {
                            continue;
                        }
                        prop_assert_eq!(
                            &w.features[pos * FEATURE_DIM..(pos + 1) * FEATURE_DIM],
                            video.frame_features(frame)
                        );
                        prop_assert_eq!(w.labels[pos], video.labels()[frame]);
                        frame += 1;
                    }
                }
                prop_assert_eq!(frame, video.frame_count());
            }
        }

        #[test]
        fn shuffling_preserves_window_multiset(
            count in 1usize..40,
            batch in 1usize..10,
            seed in 0u64..500,
        ) {
            let videos: Vec<VideoFrames> = (0..count)
                .map(|i| synthetic_video(&format!("v{i}"), 64, i as u64))
                .collect();
            let windows = window_sequences(&videos);
            let mut rng = RngState::new(seed);
            let mut seen: Vec<(String, usize)> = make_batches(&windows, batch, &mut rng)
                .unwrap()
                .flat_map(|b| b.window_ids)
                .collect();
            seen.sort();
            let mut want: Vec<(String, usize)> = windows
                .iter()
                .map(|w| (w.video_id.clone(), w.start_frame))
                .collect();
            want.sort();
            prop_assert_eq!(seen, want);
        }
    }
}

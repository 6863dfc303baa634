//! Unified token-sequence representation of logged data: one BOS token,
//! session-boundary tokens carrying pre-session affect, and song tokens
//! carrying feedback with presence masks. Missing numeric fields are stored
//! as 0 with mask=false; the model input concatenates value and mask, so an
//! observed 0 stays distinguishable from an absent value.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::datagen::{Catalogue, Interaction, SessionLog, UserLog};
use crate::worldmodel::FeedbackPrediction;

#[derive(Debug, Error)]
pub enum HistoryError {
    #[error("cannot build a token sequence from an empty log (user {0})")]
    EmptyLog(usize),
    #[error("song id {song} out of catalogue range {size}")]
    UnknownSong { song: usize, size: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Bos,
    Song,
    Boundary,
}

/// One step of a user history.
#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    pub song_id: Option<usize>,
    pub song_embedding: Option<Vec<f64>>,
    pub engagement: f64,
    pub rating: f64,
    pub valence: f64,
    pub arousal: f64,
    pub mask_engagement: bool,
    pub mask_rating: bool,
    pub mask_valence: bool,
    pub mask_arousal: bool,
    pub target_engagement: bool,
    pub target_rating: bool,
    pub target_valence: bool,
    pub target_arousal: bool,
}

impl Token {
    pub fn bos() -> Self {
        Token {
            kind: TokenKind::Bos,
            song_id: None,
            song_embedding: None,
            engagement: 0.0,
            rating: 0.0,
            valence: 0.0,
            arousal: 0.0,
            mask_engagement: false,
            mask_rating: false,
            mask_valence: false,
            mask_arousal: false,
            target_engagement: false,
            target_rating: false,
            target_valence: false,
            target_arousal: false,
        }
    }

    /// Session-boundary token carrying the pre-session affect report.
    /// Pre-session affect is input context only and never a loss target.
    pub fn boundary(pre_valence: f64, pre_arousal: f64) -> Self {
        Token {
            kind: TokenKind::Boundary,
            valence: pre_valence,
            arousal: pre_arousal,
            mask_valence: true,
            mask_arousal: true,
            ..Token::bos()
        }
    }

    pub fn has_any_target(&self) -> bool {
        self.target_engagement || self.target_rating || self.target_valence || self.target_arousal
    }
}

/// Where a token came from in the original log.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenOrigin {
    Bos,
    Boundary { session_id: usize },
    Song { session_id: usize, position: usize },
}

#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub user_id: usize,
    pub tokens: Vec<Token>,
    pub origins: Vec<TokenOrigin>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Contiguous segment of a user's sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub user_id: usize,
    pub start: usize,
    pub len: usize,
}

impl Window {
    pub fn slice<'a>(&self, seq: &'a TokenSequence) -> &'a [Token] {
        assert_eq!(seq.user_id, self.user_id, "window applied to the wrong user");
        &seq.tokens[self.start..self.start + self.len]
    }
}

/// Token count = 1 BOS + one boundary per session + one token per
/// interaction. Post-session affect attaches to the final song token of its
/// session, as both observed context and the session's affect target.
pub fn build_sequence(log: &UserLog, catalogue: &Catalogue) -> Result<TokenSequence, HistoryError> {
    if log.sessions.is_empty() || log.sessions.iter().all(|s| s.interactions.is_empty()) {
        return Err(HistoryError::EmptyLog(log.user_id));
    }
    let mut tokens = vec![Token::bos()];
    let mut origins = vec![TokenOrigin::Bos];
    for session in &log.sessions {
        tokens.push(Token::boundary(session.pre_affect.0, session.pre_affect.1));
        origins.push(TokenOrigin::Boundary { session_id: session.session_id });
        let last = session.interactions.len().saturating_sub(1);
        for (position, i) in session.interactions.iter().enumerate() {
            if i.song_id >= catalogue.n_songs() {
                return Err(HistoryError::UnknownSong { song: i.song_id, size: catalogue.n_songs() });
            }
            let mut token = Token {
                kind: TokenKind::Song,
                song_id: Some(i.song_id),
                song_embedding: Some(catalogue.embedding(i.song_id).to_vec()),
                engagement: i.engagement,
                mask_engagement: true,
                target_engagement: true,
                ..Token::bos()
            };
            if let Some(r) = i.rating {
                token.rating = if r { 1.0 } else { 0.0 };
                token.mask_rating = true;
                token.target_rating = true;
            }
            if position == last {
                if let Some((v, a)) = session.post_affect {
                    token.valence = v;
                    token.arousal = a;
                    token.mask_valence = true;
                    token.mask_arousal = true;
                    token.target_valence = true;
                    token.target_arousal = true;
                }
            }
            tokens.push(token);
            origins.push(TokenOrigin::Song { session_id: session.session_id, position });
        }
    }
    Ok(TokenSequence { user_id: log.user_id, tokens, origins })
}

/// Inverse of `build_sequence` over observed signals; used to check the
/// round-trip invariant. The in-memory forced_repeat flag is not encoded in
/// tokens and comes back false.
pub fn reconstruct_user_log(seq: &TokenSequence) -> UserLog {
    let mut sessions: Vec<SessionLog> = Vec::new();
    for (token, origin) in seq.tokens.iter().zip(&seq.origins) {
        match origin {
            TokenOrigin::Bos => {}
            TokenOrigin::Boundary { session_id } => sessions.push(SessionLog {
                session_id: *session_id,
                pre_affect: (token.valence, token.arousal),
                post_affect: None,
                interactions: Vec::new(),
            }),
            TokenOrigin::Song { .. } => {
                let session = sessions.last_mut().expect("song token before any boundary");
                session.interactions.push(Interaction {
                    song_id: token.song_id.expect("song token without id"),
                    engagement: token.engagement,
                    rating: if token.mask_rating { Some(token.rating > 0.5) } else { None },
                    forced_repeat: false,
                });
                if token.target_valence {
                    session.post_affect = Some((token.valence, token.arousal));
                }
            }
        }
    }
    UserLog { user_id: seq.user_id, sessions }
}

/// `n_windows` windows with lengths uniform in `len_range` clamped to the
/// sequence length and starts uniform among valid positions.
pub fn sample_windows(
    seq: &TokenSequence,
    n_windows: usize,
    len_range: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Vec<Window> {
    assert!(seq.len() >= 2, "sequence too short to window");
    assert!(len_range.0 >= 1 && len_range.0 <= len_range.1, "empty window length range");
    let n = seq.len();
    (0..n_windows)
        .map(|_| {
            let drawn = rng.gen_range(len_range.0..=len_range.1);
            let len = drawn.min(n);
            let start = rng.gen_range(0..=n - len);
            Window { user_id: seq.user_id, start, len }
        })
        .collect()
}

/// Append one rollout step: the recommendation plus its predicted feedback,
/// treated from then on as observed context (all masks set, no targets).
pub fn append_step(
    history: &mut Vec<Token>,
    song_id: usize,
    song_embedding: &[f64],
    pred: &FeedbackPrediction,
) {
    history.push(Token {
        kind: TokenKind::Song,
        song_id: Some(song_id),
        song_embedding: Some(song_embedding.to_vec()),
        engagement: pred.engagement,
        rating: pred.rating,
        valence: pred.valence,
        arousal: pred.arousal,
        mask_engagement: true,
        mask_rating: true,
        mask_valence: true,
        mask_arousal: true,
        target_engagement: false,
        target_rating: false,
        target_valence: false,
        target_arousal: false,
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_world, GeneratorConfig};

    fn world() -> crate::datagen::SyntheticWorld {
        generate_world(&GeneratorConfig {
            n_users: 5,
            n_songs: 30,
            n_genres: 3,
            sessions_per_user: (2, 4),
            songs_per_session: (2, 5),
            seed: 77,
            ..GeneratorConfig::default()
        })
        .unwrap()
    }

    fn hand_log() -> UserLog {
        UserLog {
            user_id: 3,
            sessions: vec![SessionLog {
                session_id: 0,
                pre_affect: (0.4, 0.6),
                post_affect: Some((0.7, 0.3)),
                interactions: vec![
                    Interaction { song_id: 0, engagement: 0.9, rating: Some(true), forced_repeat: false },
                    Interaction { song_id: 1, engagement: 0.2, rating: None, forced_repeat: false },
                    Interaction { song_id: 2, engagement: 0.5, rating: Some(false), forced_repeat: false },
                ],
            }],
        }
    }

    #[test]
    fn token_count_and_layout() {
        let w = world();
        let seq = build_sequence(&hand_log(), &w.catalogue).unwrap();
        // BOS + 1 boundary + 3 songs.
        assert_eq!(seq.len(), 5);
        assert_eq!(seq.tokens[0].kind, TokenKind::Bos);
        assert_eq!(seq.tokens[1].kind, TokenKind::Boundary);
        assert!(seq.tokens[2..].iter().all(|t| t.kind == TokenKind::Song));

        // BOS carries no signals.
        let bos = &seq.tokens[0];
        assert!(!bos.mask_engagement && !bos.mask_rating && !bos.mask_valence && !bos.mask_arousal);

        // Pre-session affect is context, never a target.
        let boundary = &seq.tokens[1];
        assert!(boundary.mask_valence && boundary.mask_arousal);
        assert!(!boundary.target_valence && !boundary.target_arousal);

        // Missing rating on song 2 is masked out of the loss.
        let song2 = &seq.tokens[3];
        assert!(!song2.mask_rating && !song2.target_rating);
        assert_eq!(song2.rating, 0.0);

        // Post-session affect lands on the final song token as a target.
        let last = &seq.tokens[4];
        assert!(last.target_valence && last.target_arousal);
        assert_eq!((last.valence, last.arousal), (0.7, 0.3));
        assert!(seq.tokens[2..4].iter().all(|t| !t.target_valence));
    }

    #[test]
    fn session_without_post_report_has_no_affect_targets() {
        let mut log = hand_log();
        log.sessions[0].post_affect = None;
        let w = world();
        let seq = build_sequence(&log, &w.catalogue).unwrap();
        assert!(seq.tokens.iter().all(|t| !t.target_valence && !t.target_arousal));
    }

    #[test]
    fn empty_log_is_an_error() {
        let w = world();
        let log = UserLog { user_id: 9, sessions: vec![] };
        assert!(matches!(build_sequence(&log, &w.catalogue), Err(HistoryError::EmptyLog(9))));
    }

    #[test]
    fn round_trip_preserves_observed_signals() {
        let w = world();
        for log in &w.dataset.users {
            let seq = build_sequence(log, &w.catalogue).unwrap();
            let expected_len =
                1 + log.sessions.len() + log.sessions.iter().map(|s| s.interactions.len()).sum::<usize>();
            assert_eq!(seq.len(), expected_len);

            let back = reconstruct_user_log(&seq);
            let mut stripped = log.clone();
            for s in &mut stripped.sessions {
                for i in &mut s.interactions {
                    i.forced_repeat = false;
                }
            }
            assert_eq!(back, stripped);
        }
    }

    #[test]
    fn mask_target_consistency() {
        let w = world();
        for log in &w.dataset.users {
            let seq = build_sequence(log, &w.catalogue).unwrap();
            for t in &seq.tokens {
                assert!(!t.target_engagement || t.mask_engagement);
                assert!(!t.target_rating || t.mask_rating);
                assert!(!t.target_valence || t.mask_valence);
                assert!(!t.target_arousal || t.mask_arousal);
                if t.kind == TokenKind::Song {
                    assert!(t.mask_engagement);
                }
            }
        }
    }

    #[test]
    fn short_sequences_clamp_to_full_length() {
        let w = world();
        let seq = build_sequence(&w.dataset.users[0], &w.catalogue).unwrap();
        assert!(seq.len() < 50);
        let windows = sample_windows(&seq, 5, (50, 1000), &mut crate::numerics::rng::seeded(1));
        assert_eq!(windows.len(), 5);
        for win in windows {
            assert_eq!(win.start, 0);
            assert_eq!(win.len, seq.len());
        }
    }

    #[test]
    fn windows_are_deterministic_and_in_bounds() {
        let w = world();
        let seq = build_sequence(&w.dataset.users[1], &w.catalogue).unwrap();
        let a = sample_windows(&seq, 5, (3, 8), &mut crate::numerics::rng::seeded(42));
        let b = sample_windows(&seq, 5, (3, 8), &mut crate::numerics::rng::seeded(42));
        assert_eq!(a, b);
        for win in a {
            assert!(win.len >= 3 && win.len <= 8);
            assert!(win.start + win.len <= seq.len());
            assert_eq!(win.slice(&seq).len(), win.len);
        }
    }

    #[test]
    fn append_step_grows_history_with_full_masks() {
        let w = world();
        let seq = build_sequence(&w.dataset.users[0], &w.catalogue).unwrap();
        let mut history = seq.tokens.clone();
        let before = history.len();
        let pred = FeedbackPrediction { engagement: 0.8, rating: 0.6, valence: 0.55, arousal: 0.45 };
        for step in 0..4 {
            append_step(&mut history, step, w.catalogue.embedding(step), &pred);
        }
        assert_eq!(history.len(), before + 4);
        let t = history.last().unwrap();
        assert!(t.mask_engagement && t.mask_rating && t.mask_valence && t.mask_arousal);
        assert!(!t.has_any_target());
        assert_eq!(t.rating, 0.6);
    }
}

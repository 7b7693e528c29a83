//! Observation / action windows with edge replication.

use super::Episode;

/// Time indices read for a window ending its observation history at `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowIndices {
    /// `t - T_s + 1 ..= t`, clamped at 0.
    pub states: Vec<usize>,
    /// `t .. t + T_a`, clamped at `len - 1`.
    pub actions: Vec<usize>,
}

pub fn window_indices(len: usize, t: usize, history: usize, horizon: usize) -> WindowIndices {
    assert!(t < len, "window start {t} outside episode of length {len}");
    let states = (0..history).map(|i| (t + i + 1).saturating_sub(history)).collect();
    let actions = (0..horizon).map(|i| (t + i).min(len - 1)).collect();
    WindowIndices { states, actions }
}

/// State indices `offset` steps ahead of the window at `t`, clamped to the
/// episode end (future-prediction reconstruction targets).
pub fn future_state_indices(len: usize, t: usize, history: usize, offset: usize) -> Vec<usize> {
    window_indices(len, t, history, 1).states.into_iter().map(|i| (i + offset).min(len - 1)).collect()
}

/// A window's raw contents: per-camera HWC frames, low-dim rows, action rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub images: Vec<Vec<f32>>,
    pub lowdim: Vec<f32>,
    pub actions: Vec<f32>,
}

pub fn window(ep: &Episode, t: usize, history: usize, horizon: usize) -> Window {
    let idx = window_indices(ep.len, t, history, horizon);
    let images = (0..ep.cameras()).map(|c| idx.states.iter().flat_map(|&s| ep.frame(c, s).iter().copied()).collect()).collect();
    Window {
        images,
        lowdim: idx.states.iter().flat_map(|&s| ep.lowdim_at(s).iter().copied()).collect(),
        actions: idx.actions.iter().flat_map(|&a| ep.action_at(a).iter().copied()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn episode(len: usize) -> Episode {
        let images = vec![(0..len * 12).map(|i| (i / 12) as f32).collect()];
        let lowdim = (0..len * 2).map(|i| (i / 2) as f32 + 0.5).collect();
        let actions = (0..len * 2).map(|i| (i / 2) as f32 * 10.0).collect();
        Episode::new((2, 2), images, 2, lowdim, 2, actions).unwrap()
    }

    #[test]
    fn start_pads_with_first_state() {
        let w = window(&episode(5), 0, 2, 8);
        assert_eq!(w.lowdim, vec![0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn end_pads_with_last_action() {
        let ep = episode(5);
        let w = window(&ep, 4, 2, 8);
        assert_eq!(w.actions, vec![40.0; 16]);
    }

    #[test]
    fn future_indices_clamp_at_end() {
        // 3 steps before the end of a 20-step episode, 8 steps ahead.
        assert_eq!(future_state_indices(20, 16, 2, 8), vec![19, 19]);
        assert_eq!(future_state_indices(20, 5, 2, 0), vec![4, 5]);
        assert_eq!(future_state_indices(20, 5, 2, 8), vec![12, 13]);
    }

    #[test]
    fn interior_windows_are_exact_slices() {
        let ep = episode(30);
        for t in 0..30 {
            let w = window(&ep, t, 2, 8);
            for (j, s) in [t.saturating_sub(1), t].iter().enumerate() {
                assert_eq!(&w.lowdim[j * 2..j * 2 + 2], ep.lowdim_at(*s));
                assert_eq!(&w.images[0][j * 12..(j + 1) * 12], ep.frame(0, *s));
            }
            for j in 0..8 {
                assert_eq!(&w.actions[j * 2..j * 2 + 2], ep.action_at((t + j).min(29)));
            }
        }
    }

    proptest! {
        #[test]
        fn indices_stay_in_bounds(len in 1usize..60, ts in 1usize..5, ta in 1usize..17, frac in 0.0f64..1.0) {
            let t = ((len as f64 * frac) as usize).min(len - 1);
            let idx = window_indices(len, t, ts, ta);
            prop_assert_eq!(idx.states.len(), ts);
            prop_assert_eq!(idx.actions.len(), ta);
            prop_assert!(idx.states.iter().chain(&idx.actions).all(|i| *i < len));
            prop_assert_eq!(*idx.states.last().unwrap(), t);
            prop_assert_eq!(idx.actions[0], t);
            prop_assert!(idx.states.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
            for (i, a) in idx.actions.iter().enumerate() {
                prop_assert_eq!(*a, (t + i).min(len - 1));
            }
        }
    }
}

//! Hindsight goal relabeling.

use rand::seq::index::sample;
use rand::Rng;

use crate::buffer::Transition;
use crate::env::{achieved, with_goal};

/// Originals interleaved with their relabeled copies, in storage order.
///
/// For transition `i`, up to `k` ids are drawn without replacement from
/// `i+1..L`; each fictional goal is the joint position of the state the drawn
/// transition starts from, and the reward is recomputed with `reward_fn(achieved
/// next position, fictional goal)`.
pub fn her_augment(
    episode: &[Transition],
    k: usize,
    dof: usize,
    rng: &mut impl Rng,
    reward_fn: impl Fn(&[f64], &[f64]) -> f64,
) -> Vec<Transition> {
    let len = episode.len();
    let mut out = Vec::with_capacity(len * (k + 1));
    for (i, tr) in episode.iter().enumerate() {
        out.push(tr.clone());
        let remaining = len - 1 - i;
        let picks = k.min(remaining);
        if picks == 0 {
            continue;
        }
        for off in sample(rng, remaining, picks).into_iter() {
            let id = i + 1 + off;
            let goal = achieved(&episode[id].obs, dof).to_vec();
            let reward = reward_fn(achieved(&tr.next_obs, dof), &goal);
            out.push(Transition {
                obs: with_goal(&tr.obs, dof, &goal),
                action: tr.action.clone(),
                reward,
                next_obs: with_goal(&tr.next_obs, dof, &goal),
                done: tr.done,
            });
        }
    }
    out
}

/// Number of relabeled transitions produced for an episode of length `len`.
pub fn relabel_count(len: usize, k: usize) -> usize {
    (0..len).map(|i| k.min(len - 1 - i)).sum()
}

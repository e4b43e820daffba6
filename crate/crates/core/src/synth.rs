//! Synthetic click logs with known structure, for tests, benches and the
//! bundled toy dataset.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Interaction, SideInfo, Vocabularies};
use crate::UserId;

#[derive(Debug, Clone, Default)]
pub struct Synthetic {
    pub interactions: Vec<Interaction>,
    pub vocabs: Vocabularies,
    /// Latent type of every user, where the generator has one.
    pub user_types: BTreeMap<UserId, usize>,
}

impl Synthetic {
    fn click(&mut self, user: &str, item: &str, timestamp: i64, side: Option<(&str, &str, f64)>) {
        let user = self.vocabs.users.get_or_insert(user);
        let item = self.vocabs.items.get_or_insert(item);
        let mut event = Interaction::new(user, item, timestamp);
        if let Some((seller, brand, price)) = side {
            event.side = SideInfo {
                seller: Some(self.vocabs.sellers.get_or_insert(seller)),
                brand: Some(self.vocabs.brands.get_or_insert(brand)),
                category: None,
                price: Some(price),
            };
        }
        self.interactions.push(event);
    }
}

/// Clustered catalog with two user types.
///
/// Each cluster has a hub item and two halves of `half` items. A visit clicks a
/// random hub, then an item from the half matching the user's type. The hub's
/// neighbour list therefore mixes both halves while each user only ever wants one.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedConfig {
    pub users: usize,
    pub clusters: usize,
    pub half: usize,
    pub visits: usize,
    pub seed: u64,
    /// Seller per cluster, brand per user type, and type-dependent prices.
    pub side_info: bool,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            users: 2000,
            clusters: 61,
            half: 40,
            visits: 10,
            seed: 0,
            side_info: true,
        }
    }
}

impl PlantedConfig {
    pub fn item_count(&self) -> usize {
        self.clusters * (2 * self.half + 1)
    }
}

pub fn planted_preference(cfg: &PlantedConfig) -> Synthetic {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Synthetic::default();
    for u in 0..cfg.users {
        let user = format!("u{u}");
        let kind = u % 2;
        let mut seen = HashSet::new();
        for v in 0..cfg.visits {
            let c = rng.gen_range(0..cfg.clusters);
            let t = 2 * v as i64;
            let hub_side = cfg.side_info.then(|| (format!("s{c}"), "bh".to_string(), 50.0));
            out.click(&user, &format!("c{c}"), t, hub_side.as_ref().map(|(s, b, p)| (s.as_str(), b.as_str(), *p)));
            let mut j = rng.gen_range(0..cfg.half);
            for _ in 0..8 {
                if !seen.contains(&(c, j)) {
                    break;
                }
                j = rng.gen_range(0..cfg.half);
            }
            seen.insert((c, j));
            let price = if kind == 0 { 10.0 + j as f64 } else { 100.0 + j as f64 };
            let side = cfg.side_info.then(|| (format!("s{c}"), format!("b{kind}"), price));
            out.click(&user, &format!("c{c}x{kind}y{j}"), t + 1, side.as_ref().map(|(s, b, p)| (s.as_str(), b.as_str(), *p)));
        }
        let dense = out.vocabs.users.get(&user).expect("user inserted");
        out.user_types.insert(dense, kind);
    }
    out
}

/// Log in which every pattern item `a` is followed, `k` clicks later, by its
/// partner `d`, with `k - 1` noise clicks in between.
#[derive(Debug, Clone, PartialEq)]
pub struct RecencyConfig {
    pub users: usize,
    pub patterns: usize,
    pub k: usize,
    pub episodes: usize,
    pub noise_pool: usize,
    pub seed: u64,
}

impl Default for RecencyConfig {
    fn default() -> Self {
        RecencyConfig {
            users: 400,
            patterns: 30,
            k: 3,
            episodes: 4,
            noise_pool: 3000,
            seed: 0,
        }
    }
}

pub fn planted_recency(cfg: &RecencyConfig) -> Synthetic {
    assert!(cfg.k >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Synthetic::default();
    let noise: Vec<usize> = (0..cfg.noise_pool).collect();
    for u in 0..cfg.users {
        let user = format!("u{u}");
        let mut t = 0;
        let mut patterns: Vec<usize> = (0..cfg.patterns).collect();
        patterns.shuffle(&mut rng);
        let mut used = HashSet::new();
        for &p in patterns.iter().take(cfg.episodes) {
            out.click(&user, &format!("a{p}"), t, None);
            t += 1;
            for _ in 1..cfg.k {
                let n = loop {
                    let n = *noise.choose(&mut rng).expect("noise pool is non-empty");
                    if used.insert(n) {
                        break n;
                    }
                };
                out.click(&user, &format!("n{n}"), t, None);
                t += 1;
            }
            out.click(&user, &format!("d{p}"), t, None);
            t += 1;
        }
    }
    out
}

/// Small planted-preference log with side info, used as the bundled toy dataset.
pub fn toy() -> Synthetic {
    planted_preference(&PlantedConfig {
        users: 40,
        clusters: 5,
        half: 4,
        visits: 4,
        seed: 7,
        side_info: true,
    })
}

use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::Sample;
use crate::error::{Error, Result};

use super::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Cross,
    Disk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Qualifier {
    Any,
    Left,
    Right,
    Top,
    Bottom,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Cross, Shape::Disk];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Cross => "cross",
            Shape::Disk => "disk",
        }
    }

    /// Whether offset `(dy, dx)` from the center is covered at `radius`.
    pub fn covers(self, dy: i64, dx: i64, radius: i64) -> bool {
        match self {
            Shape::Square => dy.abs() <= radius && dx.abs() <= radius,
            Shape::Disk => dy * dy + dx * dx <= radius * radius,
            Shape::Cross => {
                let arm = radius / 3;
                (dy.abs() <= radius && dx.abs() <= arm) || (dx.abs() <= radius && dy.abs() <= arm)
            }
        }
    }
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.5, -0.5, -0.5],
            Color::Green => [-0.5, 0.5, -0.5],
            Color::Blue => [-0.5, -0.5, 0.5],
        }
    }
}

impl Qualifier {
    pub const ALL: [Qualifier; 5] = [
        Qualifier::Any,
        Qualifier::Left,
        Qualifier::Right,
        Qualifier::Top,
        Qualifier::Bottom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Qualifier::Any => "any",
            Qualifier::Left => "left",
            Qualifier::Right => "right",
            Qualifier::Top => "top",
            Qualifier::Bottom => "bottom",
        }
    }
}

/// Length of [`Condition::encode`].
pub const CONDITION_DIM: usize = 11;

/// Referring descriptor: optional shape and color plus a spatial qualifier
/// that picks the extreme object among those matching the attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition {
    #[serde(default)]
    pub shape: Option<Shape>,
    #[serde(default)]
    pub color: Option<Color>,
    #[serde(default = "any_qualifier")]
    pub qualifier: Qualifier,
    #[serde(default)]
    pub negated: bool,
}

fn any_qualifier() -> Qualifier {
    Qualifier::Any
}

impl Condition {
    pub fn new(shape: Option<Shape>, color: Option<Color>, qualifier: Qualifier) -> Self {
        Self {
            shape,
            color,
            qualifier,
            negated: false,
        }
    }

    pub fn negate(mut self) -> Self {
        self.negated = true;
        self
    }

    /// One-hot shape (3) ⊕ color (3) ⊕ qualifier (5). Missing attributes
    /// leave their block at zero. The dropped condition is all zeros.
    pub fn encode(&self) -> [f64; CONDITION_DIM] {
        let mut v = [0.0; CONDITION_DIM];
        if let Some(s) = self.shape {
            v[s as usize] = 1.0;
        }
        if let Some(c) = self.color {
            v[3 + c as usize] = 1.0;
        }
        v[6 + self.qualifier as usize] = 1.0;
        v
    }

    pub fn matches_attributes(&self, obj: &ToyObject) -> bool {
        self.shape.is_none_or(|s| s == obj.shape) && self.color.is_none_or(|c| c == obj.color)
    }

    /// Indices of the objects this condition refers to.
    pub fn referents(&self, scene: &ToyScene) -> Vec<usize> {
        let cands: Vec<usize> = (0..scene.objects.len())
            .filter(|i| self.matches_attributes(&scene.objects[*i]))
            .collect();
        let key = |i: usize| -> i64 {
            let o = &scene.objects[i];
            match self.qualifier {
                Qualifier::Any => 0,
                Qualifier::Left => o.cx,
                Qualifier::Right => -o.cx,
                Qualifier::Top => o.cy,
                Qualifier::Bottom => -o.cy,
            }
        };
        let Some(best) = cands.iter().map(|i| key(*i)).min() else {
            return cands;
        };
        cands.into_iter().filter(|i| key(*i) == best).collect()
    }

    pub fn is_unique_for(&self, scene: &ToyScene, target: usize) -> bool {
        self.referents(scene) == [target]
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.negated {
            f.write_str("not ")?;
        }
        let mut parts = Vec::new();
        if self.qualifier != Qualifier::Any {
            parts.push(self.qualifier.name());
        }
        if let Some(c) = self.color {
            parts.push(c.name());
        }
        parts.push(self.shape.map_or("object", Shape::name));
        f.write_str(&parts.join(" "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyObject {
    pub shape: Shape,
    pub color: Color,
    pub cx: i64,
    pub cy: i64,
    pub radius: i64,
    /// Paint order; higher values are drawn on top.
    pub z_order: usize,
}

impl ToyObject {
    pub fn footprint(&self, grid: usize) -> Mask {
        Mask::from_fn(grid, grid, |y, x| {
            self.shape
                .covers(y as i64 - self.cy, x as i64 - self.cx, self.radius)
        })
    }
}

/// Grid image of attributed objects on a gray background, plus the visible
/// mask of every object.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyScene {
    pub grid: usize,
    pub objects: Vec<ToyObject>,
    pub image: Sample,
    pub masks: Vec<Mask>,
}

impl ToyScene {
    pub fn from_objects(grid: usize, objects: Vec<ToyObject>) -> Result<Self> {
        if objects.is_empty() {
            return Err(Error::Empty("scene objects"));
        }
        let mut order: Vec<usize> = (0..objects.len()).collect();
        order.sort_by_key(|i| objects[*i].z_order);
        let mut image = Sample::zeros(3, grid, grid);
        let mut masks = vec![Mask::empty(grid, grid); objects.len()];
        let mut covered = Mask::empty(grid, grid);
        for &i in order.iter().rev() {
            let fp = objects[i].footprint(grid);
            masks[i] = fp.and_not(&covered)?;
            covered = covered.or(&fp)?;
        }
        for (obj, m) in objects.iter().zip(&masks) {
            let rgb = obj.color.rgb();
            for y in 0..grid {
                for x in 0..grid {
                    if m.get(y, x) {
                        for (c, v) in rgb.iter().enumerate() {
                            image.set(c, y, x, *v);
                        }
                    }
                }
            }
        }
        Ok(Self {
            grid,
            objects,
            image,
            masks,
        })
    }

    /// Visible fraction of each object's footprint.
    pub fn visibility(&self) -> Vec<f64> {
        self.objects
            .iter()
            .zip(&self.masks)
            .map(|(o, m)| m.area() as f64 / o.footprint(self.grid).area() as f64)
            .collect()
    }

    /// Number of other objects sharing the color or the shape of `target`.
    pub fn attribute_sharing_distractors(&self, target: usize) -> usize {
        let t = &self.objects[target];
        self.objects
            .iter()
            .enumerate()
            .filter(|(i, o)| *i != target && (o.color == t.color || o.shape == t.shape))
            .count()
    }

    /// Per-pixel distance-to-camera proxy: a planar background receding
    /// with the row index, objects nearer the higher their paint order.
    pub fn depth_field(&self) -> Sample {
        let g = self.grid;
        let n = self.objects.len();
        let mut field = Sample::zeros(1, g, g);
        for y in 0..g {
            for x in 0..g {
                field.set(0, y, x, 1.0 + 0.5 * y as f64 / (g.max(2) - 1) as f64);
            }
        }
        for (o, m) in self.objects.iter().zip(&self.masks) {
            let depth = 0.3 + 0.1 * (n - 1 - o.z_order.min(n - 1)) as f64;
            for y in 0..g {
                for x in 0..g {
                    if m.get(y, x) {
                        field.set(0, y, x, depth);
                    }
                }
            }
        }
        field
    }
}

/// Scene generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub grid: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_radius: i64,
    pub max_radius: i64,
    pub shapes: Vec<Shape>,
    pub colors: Vec<Color>,
    pub qualifiers: Vec<Qualifier>,
    /// Minimum visible fraction of every object's footprint.
    pub min_visible: f64,
    pub max_attempts: usize,
    pub mask_delta: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            grid: 16,
            min_objects: 2,
            max_objects: 4,
            min_radius: 2,
            max_radius: 3,
            shapes: Shape::ALL.to_vec(),
            colors: Color::ALL.to_vec(),
            qualifiers: Qualifier::ALL.to_vec(),
            min_visible: 0.6,
            max_attempts: 1000,
            mask_delta: 0.4,
            train_size: 4096,
            val_size: 512,
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("task: {m}")));
        if self.grid < 8 {
            return bad("grid must be at least 8");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("object count range is empty");
        }
        if self.min_radius < 1 || self.min_radius > self.max_radius {
            return bad("radius range is empty");
        }
        if 2 * self.max_radius + 1 > self.grid as i64 {
            return bad("objects do not fit the grid");
        }
        if self.shapes.is_empty() || self.colors.is_empty() || self.qualifiers.is_empty() {
            return bad("vocabularies must be non-empty");
        }
        if !(0.0..=1.0).contains(&self.min_visible) {
            return bad("min_visible must lie in [0, 1]");
        }
        if self.max_attempts == 0 || self.mask_delta <= 0.0 {
            return bad("max_attempts and mask_delta must be positive");
        }
        Ok(())
    }

    /// Every condition expressible with this vocabulary.
    pub fn condition_vocabulary(&self) -> Vec<Condition> {
        let shapes: Vec<Option<Shape>> =
            std::iter::once(None).chain(self.shapes.iter().copied().map(Some)).collect();
        let colors: Vec<Option<Color>> =
            std::iter::once(None).chain(self.colors.iter().copied().map(Some)).collect();
        let mut out = Vec::new();
        for &q in &self.qualifiers {
            for &c in &colors {
                for &s in &shapes {
                    out.push(Condition::new(s, c, q));
                }
            }
        }
        out
    }
}

/// A scene, a condition that uniquely names one object, and that object's
/// visible mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Referral {
    pub scene: ToyScene,
    pub condition: Condition,
    pub target: usize,
    pub mask: Mask,
}

pub fn generate_scene<R: Rng + ?Sized>(cfg: &TaskConfig, rng: &mut R) -> Result<Referral> {
    cfg.validate()?;
    let vocab = cfg.condition_vocabulary();
    for _ in 0..cfg.max_attempts {
        let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let mut objects = Vec::with_capacity(n);
        for z in 0..n {
            let radius = rng.random_range(cfg.min_radius..=cfg.max_radius);
            let g = cfg.grid as i64;
            objects.push(ToyObject {
                shape: *cfg.shapes.choose(rng).unwrap(),
                color: *cfg.colors.choose(rng).unwrap(),
                cx: rng.random_range(radius..g - radius),
                cy: rng.random_range(radius..g - radius),
                radius,
                z_order: z,
            });
        }
        let scene = ToyScene::from_objects(cfg.grid, objects)?;
        if scene.visibility().iter().any(|v| *v < cfg.min_visible) {
            continue;
        }
        let options: Vec<(usize, Vec<Condition>)> = (0..n)
            .map(|i| {
                let conds = vocab
                    .iter()
                    .filter(|c| c.is_unique_for(&scene, i))
                    .copied()
                    .collect::<Vec<_>>();
                (i, conds)
            })
            .filter(|(_, c)| !c.is_empty())
            .collect();
        let Some((target, conds)) = options.choose(rng) else {
            continue;
        };
        let condition = *conds.choose(rng).unwrap();
        let mask = scene.masks[*target].clone();
        return Ok(Referral {
            target: *target,
            condition,
            mask,
            scene,
        });
    }
    Err(Error::Generation(cfg.max_attempts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generation_is_deterministic() {
        let cfg = TaskConfig::default();
        let a = generate_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = generate_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ambiguous_vocabulary_fails() {
        let cfg = TaskConfig {
            shapes: vec![Shape::Square],
            colors: vec![Color::Red],
            qualifiers: vec![Qualifier::Any],
            min_objects: 2,
            max_objects: 2,
            max_attempts: 50,
            ..TaskConfig::default()
        };
        assert!(matches!(
            generate_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(1)),
            Err(Error::Generation(50))
        ));
    }

    /// Independent matcher: the condition holds for an object iff the object
    /// has the named attributes and no other such object beats or ties it
    /// on the qualifier's axis.
    fn brute_force_matches(scene: &ToyScene, c: &Condition, i: usize) -> bool {
        let o = &scene.objects[i];
        let attr = |p: &ToyObject| {
            c.shape.map(|s| s == p.shape).unwrap_or(true) && c.color.map(|k| k == p.color).unwrap_or(true)
        };
        if !attr(o) {
            return false;
        }
        scene.objects.iter().enumerate().all(|(j, p)| {
            if j == i || !attr(p) {
                return true;
            }
            match c.qualifier {
                Qualifier::Any => false,
                Qualifier::Left => o.cx < p.cx,
                Qualifier::Right => o.cx > p.cx,
                Qualifier::Top => o.cy < p.cy,
                Qualifier::Bottom => o.cy > p.cy,
            }
        })
    }

    #[test]
    fn conditions_are_unique_and_masks_non_empty() {
        let cfg = TaskConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let r = generate_scene(&cfg, &mut rng).unwrap();
            assert!(!r.mask.is_empty());
            assert!((2..=4).contains(&r.scene.objects.len()));
            assert!(r.scene.masks.iter().all(|m| !m.is_empty()));
            let hits: Vec<usize> = (0..r.scene.objects.len())
                .filter(|i| brute_force_matches(&r.scene, &r.condition, *i))
                .collect();
            assert_eq!(hits, vec![r.target]);
            assert_eq!(r.mask, r.scene.masks[r.target]);
        }
    }

    #[test]
    fn encoding_layout() {
        let c = Condition::new(Some(Shape::Disk), Some(Color::Blue), Qualifier::Top);
        let e = c.encode();
        assert_eq!(e.len(), CONDITION_DIM);
        assert_eq!(e[2], 1.0);
        assert_eq!(e[5], 1.0);
        assert_eq!(e[9], 1.0);
        assert_eq!(e.iter().sum::<f64>(), 3.0);
        assert_eq!(c.to_string(), "top blue disk");
        assert_eq!(c.negate().to_string(), "not top blue disk");
    }

    #[test]
    fn occlusion_respects_paint_order() {
        let a = ToyObject { shape: Shape::Square, color: Color::Red, cx: 5, cy: 5, radius: 2, z_order: 0 };
        let b = ToyObject { shape: Shape::Square, color: Color::Blue, cx: 6, cy: 5, radius: 2, z_order: 1 };
        let s = ToyScene::from_objects(16, vec![a, b]).unwrap();
        assert_eq!(s.masks[1].area(), 25);
        assert_eq!(s.masks[0].area(), 5);
        assert_eq!(s.image.get(2, 5, 6), 0.5);
        assert!(s.masks[0].overlap(&s.masks[1]).unwrap().0 == 0);
    }
}

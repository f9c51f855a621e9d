//! Execution engine: assembles neural modules along a program tree and maps
//! an image to yes/no logits.
//!
//! Three interchangeable module architectures share the stem and classifier
//! plumbing. The FiLM variant keeps one set of shared convolution weights
//! modulated per token by feature-wise affine parameters; the plain tensor
//! variant gives every operator token its own convolutions; the vector
//! variant passes `[C]` summaries between modules and re-reads the stem
//! features inside each module.

use crate::lang::{ProgramTree, FIRST_OPERATOR, TOK_AND, TOK_SCENE, VOCAB_SIZE};
use modnet_tensor::store::{kaiming_init, uniform_init};
use modnet_tensor::{ParamId, ParameterStore, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Operator tokens that can head a module: ids 4..16.
pub const N_MODULE_TOKENS: usize = VOCAB_SIZE - FIRST_OPERATOR as usize;

pub const IMG_H: usize = crate::data::render::IMG_SIDE;
/// Stem output spatial extent: 30x30 halved by the stride-2 convolution.
pub const FEAT_H: usize = 15;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ModuleArch {
    TensorFilm,
    TensorNmn,
    VectorNmn,
}

impl ModuleArch {
    pub fn tag(self) -> &'static str {
        match self {
            ModuleArch::TensorFilm => "tensor-film",
            ModuleArch::TensorNmn => "tensor-nmn",
            ModuleArch::VectorNmn => "vector-nmn",
        }
    }

    pub fn from_tag(s: &str) -> Option<Self> {
        match s {
            "tensor-film" => Some(ModuleArch::TensorFilm),
            "tensor-nmn" => Some(ModuleArch::TensorNmn),
            "vector-nmn" => Some(ModuleArch::VectorNmn),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EeConfig {
    pub arch: ModuleArch,
    /// Module width C: stem output channels and module feature channels.
    pub channels: usize,
    /// Module-embedding width.
    pub embed: usize,
    /// Hidden width of the FiLM-parameter MLPs.
    pub film_hidden: usize,
    /// Hidden width of the classifier MLP.
    pub cls_hidden: usize,
}

impl Default for EeConfig {
    fn default() -> Self {
        EeConfig {
            arch: ModuleArch::TensorFilm,
            channels: 64,
            embed: 64,
            film_hidden: 64,
            cls_hidden: 64,
        }
    }
}

impl EeConfig {
    pub fn tiny() -> Self {
        EeConfig { channels: 8, embed: 8, film_hidden: 8, cls_hidden: 8, ..Self::default() }
    }
}

/// One module invocation in execution order (children before parents; the
/// root is last). Argument slots index earlier invocations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Invocation {
    pub token: u8,
    pub args: [Option<usize>; 2],
}

/// Flatten a program tree into the execution schedule.
pub fn assemble(tree: &ProgramTree) -> Vec<Invocation> {
    fn walk(t: &ProgramTree, out: &mut Vec<Invocation>) -> usize {
        let mut args = [None; 2];
        for (i, child) in t.children.iter().enumerate() {
            args[i] = Some(walk(child, out));
        }
        out.push(Invocation { token: t.token, args });
        out.len() - 1
    }
    let mut out = Vec::with_capacity(tree.len());
    walk(tree, &mut out);
    out
}

struct ConvIds {
    w: ParamId,
    b: ParamId,
}

struct MlpIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Per-token convolutions for the plain tensor architecture. `pre` exists
/// only for the binary token.
struct TokenConvIds {
    pre: Option<ConvIds>,
    conv1: ConvIds,
    conv2: ConvIds,
}

struct FilmIds {
    embed: ParamId,
    site_h: MlpIds,
    site_x: MlpIds,
    site_g: MlpIds,
    w1: ConvIds,
    w2: ConvIds,
    proj: ConvIds,
}

struct VectorIds {
    embed: ParamId,
    start: ParamId,
    film: MlpIds,
    conv1: ConvIds,
    conv2: ConvIds,
}

enum ArchIds {
    Film(FilmIds),
    Tensor(Vec<Option<TokenConvIds>>),
    Vector(VectorIds),
}

struct Ids {
    stem1: ConvIds,
    stem2: ConvIds,
    cls_conv: Option<ConvIds>,
    cls: MlpIds,
    arch: ArchIds,
}

pub struct ExecutionEngine<T: Scalar> {
    pub cfg: EeConfig,
    pub store: ParameterStore<T>,
    ids: Ids,
}

impl<T: Scalar> ExecutionEngine<T> {
    pub fn new(cfg: EeConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let c = cfg.channels;
        let conv = |store: &mut ParameterStore<T>,
                    rng: &mut ChaCha8Rng,
                    name: &str,
                    o: usize,
                    i: usize,
                    k: usize| {
            let w = store.register(
                &format!("{name}.w"),
                kaiming_init(rng, &[o, i, k, k], i * k * k),
            );
            let b = store.register(&format!("{name}.b"), Tensor::zeros(&[o]));
            ConvIds { w, b }
        };
        // A two-layer MLP; `gamma_c` > 0 requests FiLM identity start: zero
        // final weights, bias 1 on the first `gamma_c` outputs, 0 after.
        let mlp = |store: &mut ParameterStore<T>,
                   rng: &mut ChaCha8Rng,
                   name: &str,
                   d_in: usize,
                   d_h: usize,
                   d_out: usize,
                   gamma_c: usize| {
            let w1 = store.register(&format!("{name}.w1"), kaiming_init(rng, &[d_h, d_in], d_in));
            let b1 = store.register(&format!("{name}.b1"), Tensor::zeros(&[d_h]));
            let (w2v, b2v) = if gamma_c > 0 {
                let mut bias = Tensor::zeros(&[d_out]);
                for v in &mut bias.data_mut()[..gamma_c] {
                    *v = T::one();
                }
                (Tensor::zeros(&[d_out, d_h]), bias)
            } else {
                (kaiming_init(rng, &[d_out, d_h], d_h), Tensor::zeros(&[d_out]))
            };
            let w2 = store.register(&format!("{name}.w2"), w2v);
            let b2 = store.register(&format!("{name}.b2"), b2v);
            MlpIds { w1, b1, w2, b2 }
        };
        let stem1 = conv(&mut store, &mut rng, "ee.stem1", c, 3, 3);
        let stem2 = conv(&mut store, &mut rng, "ee.stem2", c, c, 3);
        let arch = match cfg.arch {
            ModuleArch::TensorFilm => {
                let embed = store.register(
                    "ee.embed",
                    uniform_init(&mut rng, &[N_MODULE_TOKENS, cfg.embed], 0.08),
                );
                let site = |store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng, s: &str, n| {
                    mlp(store, rng, &format!("ee.film_{s}"), cfg.embed, cfg.film_hidden, 2 * n, n)
                };
                let site_h = site(&mut store, &mut rng, "h", c);
                let site_x = site(&mut store, &mut rng, "x", c);
                let site_g = site(&mut store, &mut rng, "g", 3 * c);
                let w1 = conv(&mut store, &mut rng, "ee.mod_w1", c, 3 * c, 3);
                let w2 = conv(&mut store, &mut rng, "ee.mod_w2", 3 * c, 3 * c, 3);
                let proj = conv(&mut store, &mut rng, "ee.mod_proj", c, 3 * c, 1);
                ArchIds::Film(FilmIds { embed, site_h, site_x, site_g, w1, w2, proj })
            }
            ModuleArch::TensorNmn => {
                let mut per_token = Vec::with_capacity(N_MODULE_TOKENS);
                for tok in FIRST_OPERATOR..VOCAB_SIZE as u8 {
                    if tok == TOK_SCENE {
                        per_token.push(None);
                        continue;
                    }
                    let base = format!("ee.tok{tok}");
                    let pre = (tok == TOK_AND)
                        .then(|| conv(&mut store, &mut rng, &format!("{base}.pre"), c, 2 * c, 1));
                    per_token.push(Some(TokenConvIds {
                        pre,
                        conv1: conv(&mut store, &mut rng, &format!("{base}.conv1"), c, c, 3),
                        conv2: conv(&mut store, &mut rng, &format!("{base}.conv2"), c, c, 3),
                    }));
                }
                ArchIds::Tensor(per_token)
            }
            ModuleArch::VectorNmn => {
                let embed = store.register(
                    "ee.embed",
                    uniform_init(&mut rng, &[N_MODULE_TOKENS, cfg.embed], 0.08),
                );
                let start =
                    store.register("ee.start", uniform_init(&mut rng, &[1, c], 0.08));
                let film = mlp(
                    &mut store,
                    &mut rng,
                    "ee.film",
                    cfg.embed + 2 * c,
                    cfg.film_hidden,
                    4 * c,
                    2 * c,
                );
                let conv1 = conv(&mut store, &mut rng, "ee.mod_conv1", c, c, 3);
                let conv2 = conv(&mut store, &mut rng, "ee.mod_conv2", c, c, 3);
                ArchIds::Vector(VectorIds { embed, start, film, conv1, conv2 })
            }
        };
        let cls_conv = match cfg.arch {
            ModuleArch::VectorNmn => None,
            _ => Some(conv(&mut store, &mut rng, "ee.cls_conv", c, c, 1)),
        };
        let cls = mlp(&mut store, &mut rng, "ee.cls", c, cfg.cls_hidden, 2, 0);
        ExecutionEngine { cfg, store, ids: Ids { stem1, stem2, cls_conv, cls, arch } }
    }

    fn conv_on(&self, tape: &mut Tape<T>, x: Var, ids: &ConvIds, stride: usize, pad: usize) -> Var {
        let w = tape.param(&self.store, ids.w);
        let b = tape.param(&self.store, ids.b);
        tape.conv2d(x, w, b, stride, pad).expect("conv shapes fixed by construction")
    }

    fn mlp_on(&self, tape: &mut Tape<T>, x: Var, ids: &MlpIds) -> Var {
        let w1 = tape.param(&self.store, ids.w1);
        let b1 = tape.param(&self.store, ids.b1);
        let w2 = tape.param(&self.store, ids.w2);
        let b2 = tape.param(&self.store, ids.b2);
        let h = tape.linear(x, w1, Some(b1));
        let h = tape.relu(h);
        tape.linear(h, w2, Some(b2))
    }

    /// `image` is a standardized `[3, 30, 30]` tensor; output `[1, C, 15, 15]`.
    pub fn stem_on(&self, tape: &mut Tape<T>, image: &Tensor<T>) -> Var {
        assert_eq!(image.shape(), &[3, IMG_H, IMG_H], "stem wants one standardized image");
        let x = tape.constant(image.clone().reshaped(&[1, 3, IMG_H, IMG_H]));
        let a = self.conv_on(tape, x, &self.ids.stem1, 1, 1);
        let a = tape.relu(a);
        let b = self.conv_on(tape, a, &self.ids.stem2, 2, 1);
        tape.relu(b)
    }

    /// FiLM parameters for one site: `(gamma, beta)` as `[n]`-shaped vars.
    fn film_params(
        &self,
        tape: &mut Tape<T>,
        mlp_in: Var,
        ids: &MlpIds,
        n: usize,
    ) -> (Var, Var) {
        let out = self.mlp_on(tape, mlp_in, ids);
        let gamma = tape.narrow_cols(out, 0, n);
        let beta = tape.narrow_cols(out, n, n);
        let gamma = tape.reshape(gamma, &[n]);
        let beta = tape.reshape(beta, &[n]);
        (gamma, beta)
    }

    fn module_embedding(&self, tape: &mut Tape<T>, table: ParamId, token: u8) -> Var {
        let t = tape.param(&self.store, table);
        tape.embedding(t, &[(token - FIRST_OPERATOR) as u32])
    }

    /// Shared-weight FiLM module. `h1`, `h2`, `x` are `[1, C, S, S]`; unary
    /// callers pass `h2 = h1`, leaves pass the stem features for both.
    pub fn forward_tensor_film(
        &self,
        tape: &mut Tape<T>,
        token: u8,
        h1: Var,
        h2: Var,
        x: Var,
    ) -> Var {
        let ArchIds::Film(f) = &self.ids.arch else {
            panic!("tensor-film forward on a {} engine", self.cfg.arch.tag())
        };
        let c = self.cfg.channels;
        let emb = self.module_embedding(tape, f.embed, token);
        let (g_h, b_h) = self.film_params(tape, emb, &f.site_h, c);
        let (g_x, b_x) = self.film_params(tape, emb, &f.site_x, c);
        let (g_g, b_g) = self.film_params(tape, emb, &f.site_g, 3 * c);
        let h1f = tape.film(h1, g_h, b_h);
        let h2f = tape.film(h2, g_h, b_h);
        let xf = tape.film(x, g_x, b_x);
        let hmax = tape.max_elem(h1f, h2f);
        let hdiff = tape.sub(h1f, h2f);
        let e = tape.concat(&[xf, hmax, hdiff], 1);
        let g = self.conv_on(tape, e, &f.w1, 1, 1);
        let gl = tape.cumsum_left(g);
        let gd = tape.cumsum_down(g);
        let cat = tape.concat(&[g, gl, gd], 1);
        let cat = tape.relu(cat);
        let cat = tape.film(cat, g_g, b_g);
        let conv = self.conv_on(tape, cat, &f.w2, 1, 1);
        let res = tape.add(conv, e);
        let y = tape.relu(res);
        self.conv_on(tape, y, &f.proj, 1, 0)
    }

    /// Per-token convolutions with a residual block; `scene` passes the stem
    /// features through.
    pub fn forward_tensor_nmn(&self, tape: &mut Tape<T>, token: u8, h1: Var, h2: Var) -> Var {
        let ArchIds::Tensor(toks) = &self.ids.arch else {
            panic!("tensor-nmn forward on a {} engine", self.cfg.arch.tag())
        };
        let Some(ids) = &toks[(token - FIRST_OPERATOR) as usize] else {
            return h1; // scene: identity on the stem features
        };
        let res_in = match &ids.pre {
            Some(pre) => {
                let cat = tape.concat(&[h1, h2], 1);
                self.conv_on(tape, cat, pre, 1, 0)
            }
            None => h1,
        };
        let a = self.conv_on(tape, res_in, &ids.conv1, 1, 1);
        let a = tape.relu(a);
        let b = self.conv_on(tape, a, &ids.conv2, 1, 1);
        let r = tape.add(b, res_in);
        tape.relu(r)
    }

    /// Vector-passing module: children summaries condition two FiLM conv
    /// blocks over the stem features; output is the pooled `[1, C]` vector.
    pub fn forward_vector_nmn(
        &self,
        tape: &mut Tape<T>,
        token: u8,
        v1: Var,
        v2: Var,
        x: Var,
    ) -> Var {
        let ArchIds::Vector(vx) = &self.ids.arch else {
            panic!("vector-nmn forward on a {} engine", self.cfg.arch.tag())
        };
        let c = self.cfg.channels;
        let emb = self.module_embedding(tape, vx.embed, token);
        let mlp_in = tape.concat(&[emb, v1, v2], 1);
        let out = self.mlp_on(tape, mlp_in, &vx.film);
        let g1 = tape.narrow_cols(out, 0, c);
        let g2 = tape.narrow_cols(out, c, c);
        let b1 = tape.narrow_cols(out, 2 * c, c);
        let b2 = tape.narrow_cols(out, 3 * c, c);
        let (g1, g2) = (tape.reshape(g1, &[c]), tape.reshape(g2, &[c]));
        let (b1, b2) = (tape.reshape(b1, &[c]), tape.reshape(b2, &[c]));
        let a = self.conv_on(tape, x, &vx.conv1, 1, 1);
        let a = tape.film(a, g1, b1);
        let a = tape.relu(a);
        let b = self.conv_on(tape, a, &vx.conv2, 1, 1);
        let b = tape.film(b, g2, b2);
        let r = tape.add(b, x);
        let r = tape.relu(r);
        tape.max_pool_spatial(r)
    }

    /// Run the assembled graph over stem features. Tensor architectures
    /// return `[1, C, S, S]`; the vector architecture returns `[1, C]`.
    pub fn run_modules(&self, tape: &mut Tape<T>, tree: &ProgramTree, x: Var) -> Var {
        let schedule = assemble(tree);
        let mut outs: Vec<Var> = Vec::with_capacity(schedule.len());
        for inv in &schedule {
            let get = |slot: Option<usize>| slot.map(|i| outs[i]);
            let out = match self.cfg.arch {
                ModuleArch::TensorFilm => {
                    let h1 = get(inv.args[0]).unwrap_or(x);
                    let h2 = get(inv.args[1]).unwrap_or(h1);
                    self.forward_tensor_film(tape, inv.token, h1, h2, x)
                }
                ModuleArch::TensorNmn => {
                    let h1 = get(inv.args[0]).unwrap_or(x);
                    let h2 = get(inv.args[1]).unwrap_or(h1);
                    self.forward_tensor_nmn(tape, inv.token, h1, h2)
                }
                ModuleArch::VectorNmn => {
                    let start = tape.param(&self.store, self.vector_ids().start);
                    let v1 = get(inv.args[0]).unwrap_or(start);
                    let v2 = get(inv.args[1]).unwrap_or(v1);
                    self.forward_vector_nmn(tape, inv.token, v1, v2, x)
                }
            };
            outs.push(out);
        }
        *outs.last().expect("non-empty schedule")
    }

    fn vector_ids(&self) -> &VectorIds {
        match &self.ids.arch {
            ArchIds::Vector(v) => v,
            _ => unreachable!("vector ids on a tensor engine"),
        }
    }

    /// Classifier over the root module output: `[1, 2]` logits.
    pub fn classify_on(&self, tape: &mut Tape<T>, root: Var) -> Var {
        let pooled = match &self.ids.cls_conv {
            Some(cc) => {
                let a = self.conv_on(tape, root, cc, 1, 0);
                let a = tape.relu(a);
                tape.max_pool_spatial(a)
            }
            None => root,
        };
        self.mlp_on(tape, pooled, &self.ids.cls)
    }

    /// Full pass on one example, producing the `[1, 2]` logit node.
    pub fn logits_on(&self, tape: &mut Tape<T>, tree: &ProgramTree, image: &Tensor<T>) -> Var {
        let x = self.stem_on(tape, image);
        let root = self.run_modules(tape, tree, x);
        self.classify_on(tape, root)
    }

    /// Cross-entropy of one example against `answer` (`false`=no, `true`=yes).
    /// Returns the loss node and its value.
    pub fn loss_on(
        &self,
        tape: &mut Tape<T>,
        tree: &ProgramTree,
        image: &Tensor<T>,
        answer: bool,
    ) -> (Var, f64) {
        let logits = self.logits_on(tape, tree, image);
        let loss = tape
            .cross_entropy_mean(logits, &[answer as u32])
            .expect("two-class logits by construction");
        let v = tape.value(loss).data()[0].as_f64();
        (loss, v)
    }

    /// Evaluation helper: logits without gradient bookkeeping.
    pub fn execute(&self, tree: &ProgramTree, image: &Tensor<T>) -> [f64; 2] {
        let mut tape = Tape::forward_only();
        let logits = self.logits_on(&mut tape, tree, image);
        let d = tape.value(logits).data();
        [d[0].as_f64(), d[1].as_f64()]
    }

    /// Predicted answer: yes iff the yes-logit wins (ties break to no).
    pub fn predict(&self, tree: &ProgramTree, image: &Tensor<T>) -> bool {
        let l = self.execute(tree, image);
        l[1] > l[0]
    }
}

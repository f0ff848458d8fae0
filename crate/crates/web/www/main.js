import init, { FlowDemo } from './pkg/rectiflow_web.js';

const STEPS_PER_FRAME = 20;
const PATHS = 300;
const TARGET_POINTS = 2000;
// World window drawn on the canvas.
const EXTENT = 7;

const $ = (id) => document.getElementById(id);
const canvas = $('plot');
const ctx = canvas.getContext('2d');

let demo = null;
let target = null;
let training = false;
let lastLoss = NaN;
let straightness = NaN;

const px = (x) => ((x + EXTENT) / (2 * EXTENT)) * canvas.width;
const py = (y) => ((EXTENT - y) / (2 * EXTENT)) * canvas.height;

const fmt = (v) => (Number.isNaN(v) ? '-' : v.toFixed(4));

function status(extra = '') {
  $('status').textContent =
    `round ${demo.round}   steps ${demo.steps}   loss ${fmt(lastLoss)}   straightness ${fmt(straightness)}` +
    (extra ? `\n${extra}` : '');
}

function drawTarget() {
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.fillStyle = 'rgba(0, 0, 0, 0.15)';
  for (let i = 0; i < target.length; i += 2) {
    ctx.fillRect(px(target[i]) - 1, py(target[i + 1]) - 1, 2, 2);
  }
}

function drawPaths() {
  const steps = Number($('euler').value);
  const flat = demo.trajectories(PATHS, steps);
  const stride = PATHS * 2;
  drawTarget();
  ctx.strokeStyle = 'rgba(40, 90, 200, 0.35)';
  for (let r = 0; r < PATHS; r++) {
    ctx.beginPath();
    for (let s = 0; s <= steps; s++) {
      const i = s * stride + 2 * r;
      if (s === 0) ctx.moveTo(px(flat[i]), py(flat[i + 1]));
      else ctx.lineTo(px(flat[i]), py(flat[i + 1]));
    }
    ctx.stroke();
  }
  ctx.fillStyle = 'rgb(200, 60, 40)';
  const end = steps * stride;
  for (let r = 0; r < PATHS; r++) {
    ctx.fillRect(px(flat[end + 2 * r]) - 1.5, py(flat[end + 2 * r + 1]) - 1.5, 3, 3);
  }
}

function guard(f) {
  try {
    f();
  } catch (e) {
    training = false;
    $('train').textContent = 'train';
    status(`error: ${e.message}`);
  }
}

function frame() {
  if (!training) return;
  guard(() => {
    lastLoss = demo.train(STEPS_PER_FRAME);
    if (demo.steps % 200 === 0) drawPaths();
    status();
  });
  requestAnimationFrame(frame);
}

function reset() {
  training = false;
  $('train').textContent = 'train';
  guard(() => {
    demo = new FlowDemo($('dataset').value, Number($('seed').value));
    target = demo.target(TARGET_POINTS);
    lastLoss = NaN;
    straightness = NaN;
    drawTarget();
    status();
  });
}

await init();
reset();

$('reset').onclick = reset;
$('dataset').onchange = reset;
$('euler').oninput = () => {
  $('euler-value').textContent = $('euler').value;
};
$('train').onclick = () => {
  training = !training;
  $('train').textContent = training ? 'pause' : 'train';
  if (training) requestAnimationFrame(frame);
};
$('sample').onclick = () =>
  guard(() => {
    drawPaths();
    straightness = demo.straightness();
    status();
  });
$('reflow').onclick = () => {
  training = false;
  $('train').textContent = 'train';
  status('coupling noise with RK45 endpoints...');
  // Let the status repaint before the blocking solve.
  setTimeout(() =>
    guard(() => {
      demo.reflow(Number($('pairs').value));
      lastLoss = NaN;
      straightness = NaN;
      drawTarget();
      status('fresh model; train it on the new pairs');
    }), 0);
};

import { HttpBridgeApi } from './api.js';
import { ConsoleController } from './controller.js';
import { ConsoleView } from './view.js';

declare global {
  interface Window {
    ICE_BRIDGE_URL?: string;
  }
}

// same-origin by default (the bridge serves this bundle); override by
// setting window.ICE_BRIDGE_URL before the module loads
const base = window.ICE_BRIDGE_URL ?? '';
const controller = new ConsoleController(new HttpBridgeApi(base));
new ConsoleView(controller).mount();
void controller.start();
